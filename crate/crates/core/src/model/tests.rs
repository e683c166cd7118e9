use super::*;
use crate::masking::{MaskPlan, Replacement};
use crate::numerics::{grad_check_fn, grad_check_params, sample_coords};
use rand::{Rng, SeedableRng};

fn small() -> ModelConfig {
    ModelConfig {
        model_dim: 16,
        ff_dim: 32,
        n_heads: 2,
        n_layers_contrastive: 1,
        n_layers_mlm: 1,
        codebook_size: 8,
        codebook_dim: 8,
        frame_dim: 6,
        vocab_size: 20,
        ..ModelConfig::desk()
    }
}

fn frames(rows: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![rows, dim], (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn none_s() -> MaskPlan {
    MaskPlan::empty(Replacement::MaskEmbedding)
}

fn none_t() -> MaskPlan {
    MaskPlan::empty(Replacement::MaskToken)
}

#[test]
fn presets_match_documented_shapes() {
    let a = ModelConfig::preset("paper-600m").unwrap();
    assert_eq!((a.model_dim, a.n_layers()), (1024, 24));
    let b = ModelConfig::preset("paper-2b").unwrap();
    assert_eq!((b.model_dim, b.n_layers()), (1408, 40));
    assert_eq!((b.n_layers_contrastive, b.n_layers_mlm), (8, 32));
    assert!(ModelConfig::preset("nope").is_err());
    // the 2B model is described as holding close to 1.84B parameters
    let n = b.param_count() as f64;
    assert!((n / 1.84e9 - 1.0).abs() < 0.02, "{n}");
}

#[test]
fn desk_parameter_count_is_exact() {
    let cfg = ModelConfig::desk();
    let store = init_params(&cfg, 0).unwrap();
    assert_eq!(store.numel(), cfg.param_count());
    assert_eq!(cfg.param_count(), 417_584);
}

#[test]
fn config_validation() {
    let mut c = small();
    c.subsample_factor = 3;
    assert!(c.validate().is_err());
    let mut c = small();
    c.n_heads = 3;
    assert!(c.validate().is_err());
    let mut c = small();
    c.set("dim", "32").unwrap();
    assert_eq!(c.model_dim, 32);
    assert!(c.set("bogus", "1").is_err());
}

#[test]
fn subsampling_length() {
    let cfg = small();
    let model = Model::new(cfg.clone()).unwrap();
    let store = init_params(&cfg, 1).unwrap();
    let x = frames(16, 6, 2);
    let plan = none_s();
    let mut t = Tape::new();
    let mut p = store.bind(&[]);
    let out = model.encode_speech(&mut t, &mut p, SpeechIn::new(&x, &plan), &QuantMode::Off).unwrap();
    assert_eq!(out.len(), 4);
    assert_eq!(t.shape(out.hidden), &[4, 16]);
    // an empty plan never touches the mask embedding
    assert!(!p.bound_names().any(|n| n == "speech.mask_emb"));
    let x = frames(17, 6, 2);
    let out = model.encode_speech(&mut t, &mut p, SpeechIn::new(&x, &plan), &QuantMode::Off).unwrap();
    assert_eq!(out.len(), 5);
}

#[test]
fn rejects_bad_inputs() {
    let cfg = small();
    let model = Model::new(cfg.clone()).unwrap();
    let store = init_params(&cfg, 1).unwrap();
    let mut t = Tape::new();
    let mut p = store.bind(&[]);
    let plan = none_t();
    assert!(matches!(
        model.encode_text(&mut t, &mut p, TextIn { ids: &[0, 0], plan: &plan }),
        Err(ModelError::Empty("text"))
    ));
    assert!(model.encode_text(&mut t, &mut p, TextIn { ids: &[], plan: &plan }).is_err());
    let long = vec![7u32; 513];
    assert!(matches!(
        model.encode_text(&mut t, &mut p, TextIn { ids: &long, plan: &plan }),
        Err(ModelError::TextTooLong { .. })
    ));
    let x = frames(8, 5, 0);
    let sp = none_s();
    assert!(matches!(
        model.encode_speech(&mut t, &mut p, SpeechIn::new(&x, &sp), &QuantMode::Off),
        Err(ModelError::FrameDim { .. })
    ));
    let x = frames(8, 6, 0);
    let paired = PairedIn {
        speech: SpeechIn::new(&x, &sp),
        text: TextIn { ids: &[], plan: &plan },
    };
    assert!(model.encode_paired(&mut t, &mut p, paired, &QuantMode::Off).is_err());
}

#[test]
fn deterministic_forward() {
    let cfg = small();
    let model = Model::new(cfg.clone()).unwrap();
    let store = init_params(&cfg, 3).unwrap();
    let x = frames(12, 6, 4);
    let plan = MaskPlan::from_positions(vec![1], Replacement::MaskEmbedding);
    let run = || {
        let mut t = Tape::new();
        let mut p = store.bind(&[]);
        let q = QuantMode::Train { temperature: 1.0, seed: 9 };
        let o = model.encode_speech(&mut t, &mut p, SpeechIn::new(&x, &plan), &q).unwrap();
        (t.value(o.hidden).to_vec(), o.speech.unwrap().quant.unwrap().ids)
    };
    assert_eq!(run(), run());
}

#[test]
fn padding_invariance() {
    let cfg = small();
    let model = Model::new(cfg.clone()).unwrap();
    let store = init_params(&cfg, 5).unwrap();
    let mut t = Tape::new();
    let mut p = store.bind(&[]);
    let plan = MaskPlan::from_positions(vec![1], Replacement::MaskToken);
    let a = model.encode_text(&mut t, &mut p, TextIn { ids: &[7, 8, 9], plan: &plan }).unwrap();
    let b = model
        .encode_text(&mut t, &mut p, TextIn { ids: &[7, 8, 9, 0, 0], plan: &plan })
        .unwrap();
    assert_eq!(b.len(), 5);
    assert_eq!(b.valid, vec![true, true, true, false, false]);
    let (va, vb) = (t.value(a.hidden), t.value(b.hidden));
    for i in 0..va.len() {
        assert!((va[i] - vb[i]).abs() < 1e-8);
    }

    let x = frames(10, 6, 6);
    let mut padded = frames(16, 6, 7);
    padded.data_mut()[..60].copy_from_slice(x.data());
    let sp = MaskPlan::from_positions(vec![0, 2], Replacement::MaskEmbedding);
    let a = model.encode_speech(&mut t, &mut p, SpeechIn::new(&x, &sp), &QuantMode::Eval).unwrap();
    let b = model
        .encode_speech(
            &mut t,
            &mut p,
            SpeechIn {
                frames: &padded,
                valid_frames: 10,
                plan: &sp,
            },
            &QuantMode::Eval,
        )
        .unwrap();
    assert_eq!(b.valid, vec![true, true, true, false]);
    let (va, vb) = (t.value(a.hidden), t.value(b.hidden));
    for i in 0..va.len() {
        assert!((va[i] - vb[i]).abs() < 1e-8);
    }
    assert!(vb[va.len()..].iter().all(|&v| v == 0.0));
}

#[test]
fn batching_does_not_mix_sequences() {
    let cfg = small();
    let model = Model::new(cfg.clone()).unwrap();
    let store = init_params(&cfg, 5).unwrap();
    let (x1, x2) = (frames(9, 6, 1), frames(14, 6, 2));
    let (sp, tp) = (none_s(), none_t());
    let mut t = Tape::new();
    let mut p = store.bind(&[]);
    let alone = model.encode_speech(&mut t, &mut p, SpeechIn::new(&x1, &sp), &QuantMode::Off).unwrap();
    let both = model
        .forward(
            &mut t,
            &mut p,
            &[SpeechIn::new(&x2, &sp), SpeechIn::new(&x1, &sp)],
            &[TextIn { ids: &[7, 9], plan: &tp }],
            &[],
            &QuantMode::Off,
        )
        .unwrap();
    let (a, b) = (t.value(alone.hidden), t.value(both.speech[1].hidden));
    assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn paired_layout() {
    let cfg = small();
    let model = Model::new(cfg.clone()).unwrap();
    let store = init_params(&cfg, 5).unwrap();
    let x = frames(16, 6, 1);
    let (sp, tp) = (none_s(), none_t());
    let mut t = Tape::new();
    let mut p = store.bind(&[]);
    let ids = [7, 8, 9, 10, 11];
    let out = model
        .encode_paired(
            &mut t,
            &mut p,
            PairedIn {
                speech: SpeechIn::new(&x, &sp),
                text: TextIn { ids: &ids, plan: &tp },
            },
            &QuantMode::Off,
        )
        .unwrap();
    assert_eq!(out.len(), 9);
    assert_eq!(out.boundary, Some(4));
    assert_eq!(&out.modality[..4], &[Modality::Speech; 4]);
    assert_eq!(&out.modality[4..], &[Modality::Text; 5]);
}

#[test]
fn quantizer_contract() {
    let cfg = small();
    let model = Model::new(cfg.clone()).unwrap();
    let store = init_params(&cfg, 8).unwrap();
    let x = frames(20, 6, 1);
    let sp = none_s();
    let ids = |mode: QuantMode| {
        let mut t = Tape::new();
        let mut p = store.bind(&[]);
        let o = model.encode_speech(&mut t, &mut p, SpeechIn::new(&x, &sp), &mode).unwrap();
        o.speech.unwrap().quant.unwrap().ids
    };
    let a = ids(QuantMode::Eval);
    assert_eq!(a, ids(QuantMode::Eval));
    assert!(a.iter().all(|&i| i < cfg.codebook_size));
    assert!(ids(QuantMode::Train { temperature: 2.0, seed: 1 }).iter().all(|&i| i < cfg.codebook_size));
}

/// The straight-through gradient with respect to the logits equals the
/// gradient of the soft path `softmax(z)·C`.
#[test]
fn straight_through_matches_soft_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut r = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (z, cb, w) = (r(3 * 5), r(5 * 4), r(3 * 4));
    let build = |t: &mut Tape, zv: Var, hard: bool| -> Var {
        let s = t.softmax(zv);
        let s = if hard { t.straight_through(s) } else { s };
        let c = t.constant(vec![5, 4], cb.clone()).unwrap();
        let y = t.matmul(s, c).unwrap();
        let wv = t.constant(vec![3, 4], w.clone()).unwrap();
        let m = t.mul(y, wv).unwrap();
        t.sum(m)
    };
    let mut t = Tape::new();
    let zv = t.variable(vec![3, 5], z.clone()).unwrap();
    let root = build(&mut t, zv, true);
    let analytic = t.backward(root).unwrap().get_or_zeros(zv, 15);
    let err = grad_check_fn(
        |x| {
            let mut t = Tape::new();
            let zv = t.variable(vec![3, 5], x.to_vec())?;
            let root = build(&mut t, zv, false);
            Ok(t.scalar(root))
        },
        &z,
        &analytic,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn shared_softmax_is_one_block() {
    let cfg = small();
    let model = Model::new(cfg.clone()).unwrap();
    assert!(std::ptr::eq(model.ctc_head(), model.mlm_head()));
    let store = init_params(&cfg, 2).unwrap();
    let mut t = Tape::new();
    let mut p = store.bind(&[]);
    let x = t.constant(vec![3, 16], frames(3, 16, 0).into_data()).unwrap();
    let lp = model.mlm_head().log_probs(&mut t, &mut p, x).unwrap();
    for row in t.value(lp).chunks(cfg.vocab_size) {
        let s: f64 = row.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

/// Finite differences over a sample of parameters of a scalar reduction
/// of the full encoder, with every input modality and masking active.
#[test]
fn encoder_is_differentiable_end_to_end() {
    let cfg = small();
    let model = Model::new(cfg.clone()).unwrap();
    let store = init_params(&cfg, 21).unwrap();
    let x = frames(13, 6, 3);
    let y = frames(9, 6, 4);
    let sp = MaskPlan::from_positions(vec![1, 2], Replacement::MaskEmbedding);
    let tp = MaskPlan::from_positions(vec![0], Replacement::MaskToken);
    let weights = frames(40, 16, 5);
    let objective = |t: &mut Tape, p: &mut Bound| -> Result<Var, ModelError> {
        let f = model.forward(
            t,
            p,
            &[SpeechIn::new(&x, &sp)],
            &[TextIn { ids: &[7, 8, 9], plan: &tp }],
            &[PairedIn {
                speech: SpeechIn::new(&y, &sp),
                text: TextIn { ids: &[10, 11], plan: &tp },
            }],
            &QuantMode::Soft { temperature: 1.5, seed: 4 },
        )?;
        let mut terms = Vec::new();
        for o in f.speech.iter().chain(&f.text).chain(&f.paired) {
            let n = t.value(o.hidden).len();
            let w = t.constant(t.shape(o.hidden).to_vec(), weights.data()[..n].to_vec())?;
            let m = t.mul(o.hidden, w)?;
            terms.push(t.sum(m));
            if let Some(s) = &o.speech {
                let q = s.quant.as_ref().unwrap();
                let v = t.sum(q.vectors);
                let l = t.log(q.probs);
                let e = t.sum(l);
                let e = t.scale(e, 0.01);
                terms.push(v);
                terms.push(e);
            }
        }
        let all = t.concat_rows(&terms)?;
        Ok(t.sum(all))
    };
    let mut t = Tape::new();
    let mut p = store.bind(&[]);
    let root = objective(&mut t, &mut p).unwrap();
    let grads = p.gradients(&t.backward(root).unwrap());
    let coords = sample_coords(&store, 60, 1, |_| true);
    let analytic: Vec<f64> = coords
        .iter()
        .map(|(n, i)| grads.get(n).map_or(0.0, |g| g[*i]))
        .collect();
    let err = grad_check_params(&store, &coords, &analytic, 1e-5, |s: &ParamStore| {
        let mut t = Tape::new();
        let mut p = s.bind(&[]);
        let r = objective(&mut t, &mut p)?;
        Ok::<f64, ModelError>(t.scalar(r))
    })
    .unwrap();
    assert!(err < 1e-4, "{err}");
}
