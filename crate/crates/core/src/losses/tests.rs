use super::*;
use crate::masking::Replacement;
use crate::model::{init_params, ModelConfig, PairedIn, QuantMode, SpeechIn, TextIn};
use crate::numerics::{grad_check, relative_error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_log_probs<R: Rng>(rng: &mut R, frames: usize, vocab: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(frames * vocab);
    for _ in 0..frames {
        let z: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let lse = log_sum_exp(&z);
        out.extend(z.iter().map(|v| v - lse));
    }
    out
}

#[test]
fn single_frame_single_label() {
    let lp = [0.2f64.ln(), 0.8f64.ln()];
    let r = ctc_forward_backward(&lp, 2, &[1], 0).unwrap();
    assert!((r.loss + 0.8f64.ln()).abs() < 1e-15);
}

/// Paths aa, a_, _a collapse to "a"; __ does not.
#[test]
fn two_uniform_frames() {
    let h = 0.5f64.ln();
    let r = ctc_forward_backward(&[h, h, h, h], 2, &[1], 0).unwrap();
    assert!((r.loss - 0.287_682_072_451_780_9).abs() < 1e-12);
    assert!((r.loss + 0.75f64.ln()).abs() < 1e-15);
}

#[test]
fn repeats_need_a_separating_blank() {
    let h = 0.5f64.ln();
    let r = ctc_forward_backward(&[h, h, h, h], 2, &[1, 1], 0).unwrap();
    assert_eq!(r.status, CtcStatus::Infeasible);
    assert_eq!(r.loss, f64::INFINITY);
    assert_eq!(ctc_min_frames(&[1, 1, 2]), 4);
    assert!(ctc_forward_backward(&[h, h], 2, &[0], 0).is_err());
    let mut t = Tape::new();
    let v = t.variable(vec![2, 2], vec![h; 4]).unwrap();
    let (l, s) = ctc_loss(&mut t, v, &[1, 1], 0).unwrap();
    assert_eq!((t.scalar(l), s), (f64::INFINITY, CtcStatus::Infeasible));
}

#[test]
fn alpha_entries_are_log_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let lp = random_log_probs(&mut rng, 5, 4);
    let r = ctc_forward_backward(&lp, 4, &[1, 2], 0).unwrap();
    assert_eq!((r.table.frames, r.table.ext_len), (5, 5));
    assert!(r.table.log_alpha.iter().all(|&a| a <= 1e-12));
}

#[test]
fn matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let vocab = rng.gen_range(2..=5);
        let frames = rng.gen_range(1..=6);
        let blank = rng.gen_range(0..vocab);
        let len = rng.gen_range(0..=3);
        let target: Vec<usize> = (0..len)
            .map(|_| loop {
                let c = rng.gen_range(0..vocab);
                if c != blank {
                    break c;
                }
            })
            .collect();
        let lp = random_log_probs(&mut rng, frames, vocab);
        let fast = ctc_forward_backward(&lp, vocab, &target, blank).unwrap().loss;
        let slow = ctc_brute_force(&lp, vocab, &target, blank).unwrap();
        if fast.is_infinite() || slow.is_infinite() {
            assert_eq!(fast, slow);
        } else {
            worst = worst.max((fast - slow).abs());
        }
    }
    assert!(worst < 1e-9, "{worst}");
}

#[test]
fn collapsed_labelings_carry_all_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let vocab = rng.gen_range(2..=4);
        let frames = rng.gen_range(1..=5);
        let lp = random_log_probs(&mut rng, frames, vocab);
        let mass = collapsed_mass(&lp, vocab, 0);
        let total: f64 = mass.values().sum();
        assert!((total - 1.0).abs() < 1e-9);
        for (label, m) in mass {
            let r = ctc_forward_backward(&lp, vocab, &label, 0).unwrap();
            assert!(((-r.loss).exp() - m).abs() < 1e-12);
        }
    }
}

#[test]
fn relabeling_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let lp = random_log_probs(&mut rng, 5, 4);
    let perm = [2usize, 0, 3, 1];
    let mut permuted = vec![0.0; lp.len()];
    for t in 0..5 {
        for k in 0..4 {
            permuted[t * 4 + perm[k]] = lp[t * 4 + k];
        }
    }
    let a = ctc_forward_backward(&lp, 4, &[1, 3, 1], 0).unwrap().loss;
    let b = ctc_forward_backward(&permuted, 4, &[perm[1], perm[3], perm[1]], perm[0]).unwrap().loss;
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn deterministic_blank_frame_is_free() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let lp = random_log_probs(&mut rng, 4, 3);
    let mut longer = lp.clone();
    longer.extend([0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
    let a = ctc_forward_backward(&lp, 3, &[1, 2], 0).unwrap().loss;
    let b = ctc_forward_backward(&longer, 3, &[1, 2], 0).unwrap().loss;
    assert_eq!(a, b);
}

#[test]
fn ctc_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let logits = Tensor::new(vec![6, 5], (0..30).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let err = grad_check(
        |t, x| {
            let lp = t.log_softmax(x);
            Ok(ctc_loss(t, lp, &[1, 2, 2], 0).map_err(|_| NumericsError::Empty("ctc"))?.0)
        },
        &logits,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn contrastive_uniform_and_limit_cases() {
    let mut t = Tape::new();
    let c = t.constant(vec![4, 3], vec![1.0; 12]).unwrap();
    let q = t.constant(vec![4, 3], vec![2.0; 12]).unwrap();
    let (d, short) = sample_distractors(4, 3, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(!short);
    let l = contrastive_loss(&mut t, c, q, &d, 0.1).unwrap();
    assert!((t.scalar(l) - 4f64.ln()).abs() < 1e-12);

    let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
    let c = t.constant(vec![3, 3], eye.clone()).unwrap();
    let q = t.constant(vec![3, 3], eye).unwrap();
    let (d, _) = sample_distractors(3, 2, &mut ChaCha8Rng::seed_from_u64(0));
    let l = contrastive_loss(&mut t, c, q, &d, 1e-3).unwrap();
    assert!(t.scalar(l) < 1e-12);
}

#[test]
fn distractors_exclude_the_anchor() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (d, short) = sample_distractors(5, 8, &mut rng);
    assert!(short);
    for (i, row) in d.iter().enumerate() {
        assert_eq!(row.len(), 4);
        assert!(!row.contains(&i));
    }
}

#[test]
fn contrastive_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::new(vec![5, 8], (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let (d, _) = sample_distractors(5, 3, &mut rng);
    let err = grad_check(
        |t, x| {
            let c = t.slice_cols(x, 0, 4)?;
            let q = t.slice_cols(x, 4, 4)?;
            contrastive_loss(t, c, q, &d, 0.1).map_err(|_| NumericsError::Empty("contrastive"))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn mlm_reference_values() {
    let mut t = Tape::new();
    let v = 7;
    let lp = t.constant(vec![3, v], vec![-(v as f64).ln(); 3 * v]).unwrap();
    let l = mlm_loss(&mut t, lp, &[0, 3, 6]).unwrap();
    assert!((t.scalar(l) - (v as f64).ln()).abs() < 1e-12);
    let mut one_hot = vec![f64::NEG_INFINITY; 2 * v];
    one_hot[2] = 0.0;
    one_hot[v + 5] = 0.0;
    let lp = t.constant(vec![2, v], one_hot).unwrap();
    let l = mlm_loss(&mut t, lp, &[2, 5]).unwrap();
    assert_eq!(t.scalar(l), 0.0);
    let empty = t.constant(vec![0, v], vec![]).unwrap();
    assert!(matches!(mlm_loss(&mut t, empty, &[]), Err(LossError::NoMaskedPositions(_))));
}

#[test]
fn mlm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::new(vec![4, 6], (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let err = grad_check(
        |t, x| {
            let lp = t.log_softmax(x);
            mlm_loss(t, lp, &[1, 5, 0, 2]).map_err(|_| NumericsError::Empty("mlm"))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn diversity_extremes_and_gradient() {
    let mut t = Tape::new();
    let u = t.constant(vec![3, 4], vec![0.25; 12]).unwrap();
    let l = diversity_loss(&mut t, u).unwrap();
    assert!(t.scalar(l).abs() < 1e-12);
    let mut peaked = vec![1e-300; 8];
    peaked[1] = 1.0;
    peaked[5] = 1.0;
    let pk = t.constant(vec![2, 4], peaked).unwrap();
    let l = diversity_loss(&mut t, pk).unwrap();
    assert!((t.scalar(l) - 0.75).abs() < 1e-9);
    let x = Tensor::new(vec![3, 4], vec![0.3, -0.2, 1.0, 0.1, 0.0, 0.5, -1.0, 0.2, 0.7, 0.7, -0.3, 0.0]).unwrap();
    let err = grad_check(
        |t, x| {
            let p = t.softmax(x);
            diversity_loss(t, p).map_err(|_| NumericsError::Empty("diversity"))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn paper_loss_weights() {
    let w = LossWeights::default();
    assert_eq!((w.speech, w.text, w.paired_ctc), (1.0, 0.3, 0.03));
    assert_eq!(w.mt_weight, 5.0);
    assert!(LossWeights { text: -1.0, ..w }.validate().is_err());
}

fn tiny() -> ModelConfig {
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
        subsample_factor: 2,
        ..ModelConfig::desk()
    }
}

#[test]
fn paired_loss_bookkeeping_and_shared_gradients() {
    let cfg = tiny();
    let model = Model::new(cfg.clone()).unwrap();
    let store = init_params(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::new(vec![12, 6], (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let ids = [7u32, 8, 9];
    let sp = MaskPlan::from_positions(vec![2], Replacement::MaskEmbedding);
    let tp = MaskPlan::from_positions(vec![1], Replacement::MaskToken);
    let grads_for = |use_ctc: bool| {
        let mut t = Tape::new();
        let mut p = store.bind(&[]);
        let o = model
            .encode_paired(
                &mut t,
                &mut p,
                PairedIn {
                    speech: SpeechIn::new(&x, &sp),
                    text: TextIn { ids: &ids, plan: &tp },
                },
                &QuantMode::Eval,
            )
            .unwrap();
        let terms = paired_loss(&mut t, &mut p, &model, &[&o], &[&ids], &[&tp], true, 3).unwrap();
        assert_eq!(terms.ctc_frames, vec![6]);
        assert_eq!(o.boundary, Some(6));
        assert!(terms.tlm_speech.is_some());
        let root = if use_ctc { terms.ctc.unwrap() } else { terms.tlm_text.unwrap() };
        p.gradients(&t.backward(root).unwrap())
    };
    for use_ctc in [true, false] {
        let g = grads_for(use_ctc);
        assert!(g["softmax.w"].iter().any(|&v| v != 0.0));
    }
}

proptest! {
    #[test]
    fn ctc_is_nonnegative(seed in 0u64..500, frames in 1usize..7, len in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lp = random_log_probs(&mut rng, frames, 4);
        let target: Vec<usize> = (0..len).map(|_| rng.gen_range(1..4)).collect();
        let r = ctc_forward_backward(&lp, 4, &target, 0).unwrap();
        prop_assert!(r.loss >= 0.0);
        if r.status == CtcStatus::Ok {
            // occupancies at each frame sum to one
            for t in 0..frames {
                let s: f64 = r.grad[t * 4..(t + 1) * 4].iter().sum();
                prop_assert!(relative_error(s, -1.0) < 1e-9);
            }
        }
    }
}
