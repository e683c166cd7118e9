use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::layer_prefix;
use super::{Model, ModelError};
use crate::masking::MaskPlan;
use crate::numerics::{argmax, Bound, Tape, Tensor, Var};
use crate::vocab::{MASK, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Speech,
    Text,
}

/// Speech features whose first `valid_frames` rows are real; the mask plan
/// indexes subsampled positions.
#[derive(Clone, Copy, Debug)]
pub struct SpeechIn<'a> {
    pub frames: &'a Tensor,
    pub valid_frames: usize,
    pub plan: &'a MaskPlan,
}

impl<'a> SpeechIn<'a> {
    pub fn new(frames: &'a Tensor, plan: &'a MaskPlan) -> Self {
        Self {
            frames,
            valid_frames: frames.rows(),
            plan,
        }
    }
}

/// Character ids; `PAD` entries are padding. The mask plan indexes
/// positions of `ids`.
#[derive(Clone, Copy, Debug)]
pub struct TextIn<'a> {
    pub ids: &'a [u32],
    pub plan: &'a MaskPlan,
}

#[derive(Clone, Copy, Debug)]
pub struct PairedIn<'a> {
    pub speech: SpeechIn<'a>,
    pub text: TextIn<'a>,
}

/// Whether and how speech targets are quantized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum QuantMode {
    Off,
    /// Deterministic argmax over codebook logits.
    Eval,
    /// Gumbel-softmax with straight-through hard selection.
    Train { temperature: f64, seed: u64 },
    /// As `Train`, but the soft Gumbel distribution mixes codebook
    /// entries directly: a smooth surrogate for finite-difference checks.
    Soft { temperature: f64, seed: u64 },
}

#[derive(Clone, Debug)]
pub struct Quantized {
    /// One target id per valid subsampled position.
    pub ids: Vec<usize>,
    /// Selected codebook entries `[T, codebook_dim]`.
    pub vectors: Var,
    /// Noise-free codebook distribution `[T, codebook_size]`.
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct SpeechSide {
    /// Contrastive block output at valid subsampled positions `[T, D]`.
    pub context: Var,
    pub plan: MaskPlan,
    pub quant: Option<Quantized>,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// MLM block output, one row per position; padding rows are zero.
    pub hidden: Var,
    pub modality: Vec<Modality>,
    pub valid: Vec<bool>,
    /// Paired input: number of leading speech positions.
    pub boundary: Option<usize>,
    pub speech: Option<SpeechSide>,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Forward {
    pub speech: Vec<EncoderOutput>,
    pub text: Vec<EncoderOutput>,
    pub paired: Vec<EncoderOutput>,
}

struct TextPrep {
    len: usize,
    /// Indices of non-pad positions.
    valid_idx: Vec<usize>,
}

fn split_rows(t: &mut Tape, x: Var, lens: &[usize]) -> Result<Vec<Var>, ModelError> {
    if lens.len() == 1 {
        return Ok(vec![x]);
    }
    let mut out = Vec::with_capacity(lens.len());
    let mut start = 0;
    for &n in lens {
        out.push(t.slice_rows(x, start, n)?);
        start += n;
    }
    Ok(out)
}

fn pack(t: &mut Tape, parts: &[Var]) -> Result<Var, ModelError> {
    Ok(if parts.len() == 1 { parts[0] } else { t.concat_rows(parts)? })
}

impl Model {
    /// Encodes speech, text and paired inputs in one packed pass. Each
    /// sequence attends and convolves only within its valid positions, so
    /// results do not depend on padding or on the other sequences.
    pub fn forward(
        &self,
        t: &mut Tape,
        p: &mut Bound,
        speech: &[SpeechIn],
        text: &[TextIn],
        paired: &[PairedIn],
        quant: &QuantMode,
    ) -> Result<Forward, ModelError> {
        let cfg = &self.cfg;
        let d = cfg.model_dim;
        let sp: Vec<&SpeechIn> = speech.iter().chain(paired.iter().map(|x| &x.speech)).collect();
        let tx: Vec<&TextIn> = text.iter().chain(paired.iter().map(|x| &x.text)).collect();

        // speech side: subsampler, quantizer, masking, contrastive block
        let mut svalid = Vec::with_capacity(sp.len());
        for s in &sp {
            if s.frames.rows() == 0 || s.valid_frames == 0 || s.frames.shape().len() != 2 {
                return Err(ModelError::Empty("speech"));
            }
            if s.frames.cols() != cfg.frame_dim {
                return Err(ModelError::FrameDim {
                    expected: cfg.frame_dim,
                    got: s.frames.cols(),
                });
            }
            if s.valid_frames > s.frames.rows() {
                return Err(ModelError::InvalidConfig("valid_frames exceeds frame count".into()));
            }
            let n = cfg.subsampled_len(s.valid_frames);
            if let Some(&pos) = s.plan.positions().iter().find(|&&q| q >= n) {
                return Err(ModelError::MaskOutOfRange { pos, len: n });
            }
            svalid.push(n);
        }
        let mut context = None;
        let mut quantized: Vec<Option<Quantized>> = vec![None; sp.len()];
        if !sp.is_empty() {
            let mut xs = Vec::with_capacity(sp.len());
            for s in &sp {
                let data = s.frames.data()[..s.valid_frames * cfg.frame_dim].to_vec();
                xs.push(t.constant(vec![s.valid_frames, cfg.frame_dim], data)?);
            }
            let stages = cfg.subsample_stages();
            let mut lens: Vec<usize> = sp.iter().map(|s| s.valid_frames).collect();
            let mut feats = None;
            for stage in 0..stages.max(1) {
                let cols: Vec<Var> = if stages == 0 {
                    xs.clone()
                } else {
                    xs.iter().map(|&x| t.im2col(x, 3, 2, 1)).collect::<Result<_, _>>()?
                };
                if stages > 0 {
                    lens = lens.iter().map(|l| l.div_ceil(2)).collect();
                }
                let packed = pack(t, &cols)?;
                let y = self.affine_pub(t, p, packed, &format!("speech.sub.{stage}"))?;
                let y = t.swish(y);
                if stage + 1 < stages.max(1) {
                    xs = split_rows(t, y, &lens)?;
                } else {
                    feats = Some(y);
                }
            }
            debug_assert_eq!(lens, svalid);
            let feats = self.layer_norm(t, p, feats.unwrap(), "speech.ln")?;

            if *quant != QuantMode::Off {
                let q = self.quantize(t, p, feats, quant)?;
                let ids_all = q.ids;
                let vecs = split_rows(t, q.vectors, &svalid)?;
                let probs = split_rows(t, q.probs, &svalid)?;
                let mut off = 0;
                for (i, &n) in svalid.iter().enumerate() {
                    quantized[i] = Some(Quantized {
                        ids: ids_all[off..off + n].to_vec(),
                        vectors: vecs[i],
                        probs: probs[i],
                    });
                    off += n;
                }
            }

            let total: usize = svalid.iter().sum();
            let mut ind = vec![0.0; total];
            let mut off = 0;
            for (s, &n) in sp.iter().zip(&svalid) {
                for &q in s.plan.positions() {
                    ind[off + q] = 1.0;
                }
                off += n;
            }
            let mut x = feats;
            if ind.iter().any(|&v| v > 0.0) {
                let keep: Vec<f64> = ind.iter().flat_map(|&m| std::iter::repeat(1.0 - m).take(d)).collect();
                let keep = t.constant(vec![total, d], keep)?;
                let ind = t.constant(vec![total, 1], ind)?;
                let emb = p.get(t, "speech.mask_emb")?;
                let emb = t.reshape(emb, vec![1, d])?;
                let kept = t.mul(x, keep)?;
                let fill = t.matmul(ind, emb)?;
                x = t.add(kept, fill)?;
            }
            for l in 0..cfg.n_layers_contrastive {
                x = self.conformer_layer(t, p, x, &layer_prefix(cfg, l), &svalid)?;
            }
            context = Some(x);
        }

        // text side: masking and embedding
        let mut preps = Vec::with_capacity(tx.len());
        let mut all_ids = Vec::new();
        for s in &tx {
            if s.ids.len() > cfg.max_text_len {
                return Err(ModelError::TextTooLong {
                    len: s.ids.len(),
                    max: cfg.max_text_len,
                });
            }
            if let Some(&id) = s.ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
                return Err(ModelError::IdOutOfRange {
                    id,
                    size: cfg.vocab_size,
                });
            }
            if let Some(&pos) = s.plan.positions().iter().find(|&&q| q >= s.ids.len()) {
                return Err(ModelError::MaskOutOfRange { pos, len: s.ids.len() });
            }
            let valid_idx: Vec<usize> = (0..s.ids.len()).filter(|&i| s.ids[i] != PAD).collect();
            if valid_idx.is_empty() {
                return Err(ModelError::Empty("text"));
            }
            for &i in &valid_idx {
                all_ids.push(if s.plan.contains(i) { MASK as usize } else { s.ids[i] as usize });
            }
            preps.push(TextPrep {
                len: s.ids.len(),
                valid_idx,
            });
        }
        let embedded = if all_ids.is_empty() {
            None
        } else {
            let table = p.get(t, cfg.text_embedding_name())?;
            let e = t.embedding(table, &all_ids)?;
            Some(t.scale(e, (d as f64).sqrt()))
        };

        // MLM block over speech, text, and concatenated paired sequences
        let n_speech_rows: usize = svalid.iter().sum();
        let mut soff = Vec::with_capacity(sp.len());
        let mut acc = 0;
        for &n in &svalid {
            soff.push(acc);
            acc += n;
        }
        let mut toff = Vec::with_capacity(tx.len());
        let mut acc = n_speech_rows;
        for pr in &preps {
            toff.push(acc);
            acc += pr.valid_idx.len();
        }
        let mut idx = Vec::new();
        let mut segs = Vec::new();
        for i in 0..speech.len() {
            idx.extend(soff[i]..soff[i] + svalid[i]);
            segs.push(svalid[i]);
        }
        for j in 0..text.len() {
            let n = preps[j].valid_idx.len();
            idx.extend(toff[j]..toff[j] + n);
            segs.push(n);
        }
        for k in 0..paired.len() {
            let (si, tj) = (speech.len() + k, text.len() + k);
            let nt = preps[tj].valid_idx.len();
            idx.extend(soff[si]..soff[si] + svalid[si]);
            idx.extend(toff[tj]..toff[tj] + nt);
            segs.push(svalid[si] + nt);
        }
        let sources: Vec<Var> = context.iter().chain(embedded.iter()).copied().collect();
        let cat = pack(t, &sources)?;
        let mut h = if idx.len() == t.rows(cat) && idx.iter().enumerate().all(|(a, &b)| a == b) {
            cat
        } else {
            t.select_rows(cat, &idx)?
        };
        for l in cfg.n_layers_contrastive..cfg.n_layers() {
            h = self.conformer_layer(t, p, h, &layer_prefix(cfg, l), &segs)?;
        }
        let pieces = split_rows(t, h, &segs)?;

        let mut out = Forward::default();
        let mut pieces = pieces.into_iter();
        let ctx_rows = |t: &mut Tape, i: usize| -> Result<Var, ModelError> {
            let c = context.expect("speech context");
            if sp.len() == 1 {
                Ok(c)
            } else {
                Ok(t.slice_rows(c, soff[i], svalid[i])?)
            }
        };
        for (i, s) in speech.iter().enumerate() {
            let rows = pieces.next().unwrap();
            let padded = cfg.subsampled_len(s.frames.rows());
            let n = svalid[i];
            let hidden = if padded > n {
                let z = t.constant(vec![padded - n, d], vec![0.0; (padded - n) * d])?;
                t.concat_rows(&[rows, z])?
            } else {
                rows
            };
            out.speech.push(EncoderOutput {
                hidden,
                modality: vec![Modality::Speech; padded],
                valid: (0..padded).map(|q| q < n).collect(),
                boundary: None,
                speech: Some(SpeechSide {
                    context: ctx_rows(t, i)?,
                    plan: s.plan.clone(),
                    quant: quantized[i].take(),
                }),
            });
        }
        for j in 0..text.len() {
            let rows = pieces.next().unwrap();
            let pr = &preps[j];
            let nv = pr.valid_idx.len();
            let hidden = if nv < pr.len {
                let z = t.constant(vec![1, d], vec![0.0; d])?;
                let src = t.concat_rows(&[rows, z])?;
                let mut map = vec![nv; pr.len];
                for (k, &q) in pr.valid_idx.iter().enumerate() {
                    map[q] = k;
                }
                t.select_rows(src, &map)?
            } else {
                rows
            };
            let mut valid = vec![false; pr.len];
            for &q in &pr.valid_idx {
                valid[q] = true;
            }
            out.text.push(EncoderOutput {
                hidden,
                modality: vec![Modality::Text; pr.len],
                valid,
                boundary: None,
                speech: None,
            });
        }
        for (k, pin) in paired.iter().enumerate() {
            let rows = pieces.next().unwrap();
            let (si, tj) = (speech.len() + k, text.len() + k);
            let (ns, nt) = (svalid[si], preps[tj].valid_idx.len());
            let mut modality = vec![Modality::Speech; ns];
            modality.extend(std::iter::repeat(Modality::Text).take(nt));
            out.paired.push(EncoderOutput {
                hidden: rows,
                modality,
                valid: vec![true; ns + nt],
                boundary: Some(ns),
                speech: Some(SpeechSide {
                    context: ctx_rows(t, si)?,
                    plan: pin.speech.plan.clone(),
                    quant: quantized[si].take(),
                }),
            });
        }
        Ok(out)
    }

    fn affine_pub(&self, t: &mut Tape, p: &mut Bound, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let w = p.get(t, &format!("{prefix}.w"))?;
        let b = p.get(t, &format!("{prefix}.b"))?;
        let y = t.matmul(x, w)?;
        Ok(t.add_row(y, b)?)
    }

    /// Gumbel-softmax codebook selection over packed features `[N, D]`.
    pub(crate) fn quantize(&self, t: &mut Tape, p: &mut Bound, feats: Var, mode: &QuantMode) -> Result<Quantized, ModelError> {
        let logits = self.affine_pub(t, p, feats, "quant")?;
        let probs = t.softmax(logits);
        let soft = match *mode {
            QuantMode::Train { temperature, seed } | QuantMode::Soft { temperature, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = t.value(logits).len();
                let noise: Vec<f64> = (0..n)
                    .map(|_| {
                        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                        -(-u.ln()).ln()
                    })
                    .collect();
                let g = t.constant(t.shape(logits).to_vec(), noise)?;
                let z = t.add(logits, g)?;
                let z = t.scale(z, 1.0 / temperature);
                t.softmax(z)
            }
            _ => probs,
        };
        let g = self.cfg.codebook_size;
        let ids = t.value(soft).chunks(g).map(argmax).collect();
        let hard = if matches!(mode, QuantMode::Soft { .. }) {
            soft
        } else {
            t.straight_through(soft)
        };
        let cb = p.get(t, "quant.codebook")?;
        let vectors = t.matmul(hard, cb)?;
        Ok(Quantized { ids, vectors, probs })
    }
}
