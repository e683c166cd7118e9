//! Conformer speech-text encoder with a shared character softmax.

mod config;
mod conformer;
mod encoder;

pub use config::{Init, ModelConfig, ParamSpec, PRESETS};
pub use encoder::{
    EncoderOutput, Forward, Modality, PairedIn, QuantMode, Quantized, SpeechIn, SpeechSide, TextIn,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::masking::{MaskPlan, Replacement};
use crate::numerics::{Bound, NumericsError, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("unknown model preset {0:?}")]
    UnknownPreset(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("empty {0} input")]
    Empty(&'static str),
    #[error("frames have dimension {got}, model expects {expected}")]
    FrameDim { expected: usize, got: usize },
    #[error("text of length {len} exceeds the {max}-character cap")]
    TextTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("mask position {pos} outside sequence of length {len}")]
    MaskOutOfRange { pos: usize, len: usize },
}

/// Draws fresh parameters for `cfg` from `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in cfg.param_specs() {
        let n = spec.numel();
        let data = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan) => sample_normal(&mut rng, 1.0 / (fan as f64).sqrt(), n),
            Init::Normal(std) => sample_normal(&mut rng, std, n),
        };
        store.insert(spec.name, Tensor::new(spec.shape, data)?);
    }
    Ok(store)
}

fn sample_normal(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// A `[in] → [out]` affine output layer followed by log-softmax.
#[derive(Debug, PartialEq, Eq)]
pub struct SoftmaxHead {
    pub weight: &'static str,
    pub bias: &'static str,
    /// Weight stored as `[out, in]` (true) or `[in, out]` (false).
    pub transposed: bool,
}

impl SoftmaxHead {
    pub fn logits(&self, tape: &mut Tape, p: &mut Bound, x: Var) -> Result<Var, ModelError> {
        let w = p.get(tape, self.weight)?;
        let b = p.get(tape, self.bias)?;
        let z = if self.transposed {
            tape.matmul_t(x, w)?
        } else {
            tape.matmul(x, w)?
        };
        Ok(tape.add_row(z, b)?)
    }

    pub fn log_probs(&self, tape: &mut Tape, p: &mut Bound, x: Var) -> Result<Var, ModelError> {
        let z = self.logits(tape, p, x)?;
        Ok(tape.log_softmax(z))
    }
}

/// The character softmax shared by text masked prediction, the text half
/// of paired prediction, and CTC.
pub static SHARED_SOFTMAX: SoftmaxHead = SoftmaxHead {
    weight: "softmax.w",
    bias: "softmax.b",
    transposed: true,
};

/// Masked prediction of quantized speech targets.
pub static SPEECH_HEAD: SoftmaxHead = SoftmaxHead {
    weight: "speech_head.w",
    bias: "speech_head.b",
    transposed: false,
};

/// The network definition; parameters live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn ctc_head(&self) -> &'static SoftmaxHead {
        &SHARED_SOFTMAX
    }

    pub fn mlm_head(&self) -> &'static SoftmaxHead {
        &SHARED_SOFTMAX
    }

    pub fn speech_head(&self) -> &'static SoftmaxHead {
        &SPEECH_HEAD
    }

    pub fn encode_speech(
        &self,
        tape: &mut Tape,
        p: &mut Bound,
        input: SpeechIn,
        quant: &QuantMode,
    ) -> Result<EncoderOutput, ModelError> {
        let mut f = self.forward(tape, p, &[input], &[], &[], quant)?;
        Ok(f.speech.pop().unwrap())
    }

    pub fn encode_text(&self, tape: &mut Tape, p: &mut Bound, input: TextIn) -> Result<EncoderOutput, ModelError> {
        let mut f = self.forward(tape, p, &[], &[input], &[], &QuantMode::Off)?;
        Ok(f.text.pop().unwrap())
    }

    pub fn encode_paired(
        &self,
        tape: &mut Tape,
        p: &mut Bound,
        input: PairedIn,
        quant: &QuantMode,
    ) -> Result<EncoderOutput, ModelError> {
        let mut f = self.forward(tape, p, &[], &[], &[input], quant)?;
        Ok(f.paired.pop().unwrap())
    }

    /// Unmasked encoder outputs for a batch of utterances, valid rows only.
    pub fn speech_features(&self, params: &ParamStore, frames: &[&Tensor]) -> Result<Vec<Tensor>, ModelError> {
        let empty = MaskPlan::empty(Replacement::MaskEmbedding);
        let inputs: Vec<SpeechIn> = frames.iter().map(|f| SpeechIn::new(f, &empty)).collect();
        let mut tape = Tape::new();
        let mut p = params.bind(&[]);
        let f = self.forward(&mut tape, &mut p, &inputs, &[], &[], &QuantMode::Off)?;
        Ok(f.speech.iter().map(|o| valid_rows(&tape, o)).collect())
    }

    /// Unmasked encoder outputs for a batch of character sequences.
    pub fn text_features(&self, params: &ParamStore, ids: &[&[u32]]) -> Result<Vec<Tensor>, ModelError> {
        let empty = MaskPlan::empty(Replacement::MaskToken);
        let inputs: Vec<TextIn> = ids.iter().map(|ids| TextIn { ids, plan: &empty }).collect();
        let mut tape = Tape::new();
        let mut p = params.bind(&[]);
        let f = self.forward(&mut tape, &mut p, &[], &inputs, &[], &QuantMode::Off)?;
        Ok(f.text.iter().map(|o| valid_rows(&tape, o)).collect())
    }
}

fn valid_rows(tape: &Tape, o: &EncoderOutput) -> Tensor {
    let d = tape.cols(o.hidden);
    let h = tape.value(o.hidden);
    let mut data = Vec::new();
    let mut n = 0;
    for (i, &v) in o.valid.iter().enumerate() {
        if v {
            data.extend_from_slice(&h[i * d..(i + 1) * d]);
            n += 1;
        }
    }
    Tensor::new(vec![n, d], data).expect("row slice")
}

#[cfg(test)]
mod tests;
