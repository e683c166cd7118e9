//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! The pre-training protocol mirrors `configs/desk.conf`. Criteria listed
//! in `KNOWN_FAILING` still print FAIL when they fail; they just do not
//! abort the test run. The reasons are written up in the README.
//!
//! Lines go straight to stderr so they show up without `--nocapture`.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mslam_core::corpus::{gen_synth, SynthCorpus, SynthSpec};
use mslam_core::evalkit::{synth_classification, zero_shot_eval, ClassifierConfig, Grid, TransferMatrix};
use mslam_core::gradsuite::grad_suite;
use mslam_core::losses::{collapsed_mass, ctc_brute_force, ctc_forward_backward, LossWeights};
use mslam_core::model::{Modality, Model, ModelConfig};
use mslam_core::numerics::ParamStore;
use mslam_core::probe::{fit_ctc_probe, run_probe, ProbeConfig, ProbeExample};
use mslam_core::sampler::{language_weights, LanguageStream};
use mslam_core::trainer::{corpus_vocab, lr_schedule, MaskConfig, PretrainData, Pretrainer, TrainConfig, Variant};
use mslam_core::vocab::CharVocab;

macro_rules! say {
    ($($t:tt)*) => {
        writeln!(std::io::stderr(), $($t)*).unwrap()
    };
}

const KNOWN_FAILING: &[u8] = &[6, 8];

const SEEDS: [u64; 3] = [1, 2, 3];
const PRETRAIN_STEPS: u64 = 2000;
const N_CLASSES: usize = 8;

struct Outcome {
    id: u8,
    pass: bool,
    detail: String,
}

struct Report {
    rows: Vec<Outcome>,
}

impl Report {
    fn record(&mut self, id: u8, started: Instant, pass: bool, detail: String) {
        say!(
            "criterion {id:>2}: {} [{:.1}s] {detail}",
            if pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        );
        self.rows.push(Outcome { id, pass, detail });
    }
}

fn log_softmax_rows(rng: &mut ChaCha8Rng, frames: usize, vocab: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(frames * vocab);
    for _ in 0..frames {
        let z: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(z.iter().map(|v| v - lse));
    }
    out
}

fn ctc_oracle(r: &mut Report) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst, mut infeasible) = (0.0f64, 0usize);
    let n = 600;
    for _ in 0..n {
        let frames = rng.gen_range(1..=6);
        let vocab = rng.gen_range(2..=5);
        let len = rng.gen_range(0..=3);
        let target: Vec<usize> = (0..len).map(|_| rng.gen_range(1..vocab)).collect();
        let lp = log_softmax_rows(&mut rng, frames, vocab);
        let fb = ctc_forward_backward(&lp, vocab, &target, 0).unwrap().loss;
        let bf = ctc_brute_force(&lp, vocab, &target, 0).unwrap();
        if fb.is_infinite() && bf.is_infinite() {
            infeasible += 1;
            continue;
        }
        worst = worst.max((fb - bf).abs());
    }
    let pass = worst < 1e-9 && t0.elapsed().as_secs_f64() < 30.0;
    r.record(1, t0, pass, format!("{n} instances ({infeasible} infeasible), max |ctc - brute force| = {worst:.2e}"));
}

fn mass_conservation(r: &mut Report) {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let n = 200;
    for _ in 0..n {
        let frames = rng.gen_range(1..=6);
        let vocab = rng.gen_range(2..=5);
        let lp = log_softmax_rows(&mut rng, frames, vocab);
        let total: f64 = collapsed_mass(&lp, vocab, 0).values().sum();
        worst = worst.max((total - 1.0).abs());
    }
    let pass = worst < 1e-9 && t0.elapsed().as_secs_f64() < 10.0;
    r.record(2, t0, pass, format!("{n} tables, max |total mass - 1| = {worst:.2e}"));
}

fn gradients(r: &mut Report) {
    let t0 = Instant::now();
    let checks = grad_suite(17, 50).unwrap();
    let pass = checks.iter().all(|c| c.max_rel_err < 1e-4 && c.nonzero > 0) && t0.elapsed().as_secs_f64() < 300.0;
    let detail: Vec<String> = checks
        .iter()
        .map(|c| format!("{} {:.1e} ({}/{})", c.name, c.max_rel_err, c.nonzero, c.coords))
        .collect();
    r.record(3, t0, pass, detail.join(", "));
}

fn config_fidelity(r: &mut Report) {
    let t0 = Instant::now();
    let mut ok = lr_schedule(40_000, 40_000, 6e-4) == 6e-4 && lr_schedule(160_000, 40_000, 6e-4) == 3e-4;
    let w = LossWeights::default();
    ok &= (w.speech, w.text, w.paired_ctc) == (1.0, 0.3, 0.03);
    let tc = TrainConfig::default();
    ok &= tc.batch == (2048, 8192, 256) && tc.validate().is_ok();
    let a = ModelConfig::preset("paper-600m").unwrap();
    let b = ModelConfig::preset("paper-2b").unwrap();
    ok &= (a.model_dim, a.n_layers()) == (1024, 24);
    ok &= (b.model_dim, b.n_layers(), b.n_layers_contrastive, b.n_layers_mlm) == (1408, 40, 8, 32);
    ok &= TrainConfig::for_preset("paper-2b").peak_lr == 3.6e-4;
    ok &= a.validate().is_ok() && b.validate().is_ok();
    r.record(
        4,
        t0,
        ok,
        format!(
            "paper-600m {} params, paper-2b {} params, desk {} params",
            a.param_count(),
            b.param_count(),
            ModelConfig::desk().param_count()
        ),
    );
}

fn sampler_statistics(r: &mut Report) {
    let t0 = Instant::now();
    let counts: BTreeMap<String, usize> = [("aa", 5000), ("bb", 500), ("cc", 50)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    let mut worst = 0.0f64;
    let mut worst_scale = 0.0f64;
    for t in [1.0, 3.0, 100.0] {
        let dist = language_weights(&counts, t).unwrap();
        let scaled: BTreeMap<String, usize> = counts.iter().map(|(k, v)| (k.clone(), v * 7)).collect();
        let d7 = language_weights(&scaled, t).unwrap();
        for (l, p) in dist.iter() {
            worst_scale = worst_scale.max((p - d7.get(l)).abs());
        }
        let grouped: BTreeMap<String, Vec<usize>> = counts.keys().map(|k| (k.clone(), vec![0])).collect();
        let mut stream = LanguageStream::new(grouped, &dist, 99).unwrap();
        let n = 30_000;
        let mut hits: BTreeMap<String, usize> = BTreeMap::new();
        for _ in 0..n {
            *hits.entry(stream.next_item().0.to_string()).or_default() += 1;
        }
        for (l, p) in dist.iter() {
            let f = *hits.get(l).unwrap_or(&0) as f64 / n as f64;
            worst = worst.max((f - p).abs());
        }
    }
    let pass = worst <= 0.01 && worst_scale <= 1e-12;
    r.record(10, t0, pass, format!("max L-inf deviation {worst:.4} over 30000 draws, scale drift {worst_scale:.1e}"));
}

fn desk_model() -> ModelConfig {
    let mut mc = ModelConfig::desk();
    for (k, v) in [
        ("model_dim", "32"),
        ("ff_dim", "64"),
        ("n_layers_contrastive", "1"),
        ("n_layers_mlm", "1"),
        ("subsample_factor", "2"),
        ("codebook_size", "32"),
        ("codebook_dim", "16"),
    ] {
        mc.set(k, v).unwrap();
    }
    mc
}

fn desk_train(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        warmup_steps: 100,
        peak_lr: 2e-3,
        batch: (8, 16, 8),
        variant,
        seed,
        masking: MaskConfig {
            text_span: 2,
            text_ratio: 0.15,
            speech_start_prob: 0.1,
            speech_span: 2,
        },
        ..TrainConfig::default()
    }
}

fn determinism(r: &mut Report, data: &PretrainData) {
    let t0 = Instant::now();
    let trace = || {
        let mut tr = Pretrainer::new(desk_model(), desk_train(Variant::MslamCtc, 5), data).unwrap();
        tr.run(50, None).unwrap()
    };
    let (a, b) = (trace(), trace());
    let bits = |v: &[mslam_core::trainer::StepLog]| -> Vec<u64> {
        v.iter().flat_map(|l| l.components()).map(f64::to_bits).collect()
    };
    let same_trace = bits(&a) == bits(&b);

    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("step10.bin");
    let mut straight = Pretrainer::new(desk_model(), desk_train(Variant::MslamCtc, 5), data).unwrap();
    let full = straight.run(20, None).unwrap();
    let mut first = Pretrainer::new(desk_model(), desk_train(Variant::MslamCtc, 5), data).unwrap();
    first.run(10, None).unwrap();
    first.save_checkpoint(&ck).unwrap();
    let mut resumed = Pretrainer::new(desk_model(), desk_train(Variant::MslamCtc, 5), data).unwrap();
    resumed.load_checkpoint(&ck).unwrap();
    let tail = resumed.run(10, None).unwrap();
    let same_resume = bits(&full[10..]) == bits(&tail) && straight.params.fingerprint() == resumed.params.fingerprint();
    r.record(
        9,
        t0,
        same_trace && same_resume,
        format!("50-step traces identical: {same_trace}; resume at 10 equals straight run at 20: {same_resume}"),
    );
}

struct Encoders {
    model: Model,
    params: BTreeMap<(Variant, u64), ParamStore>,
}

fn pretrain_all(data: &PretrainData) -> Encoders {
    let mut params = BTreeMap::new();
    for v in [Variant::MslamCtc, Variant::MslamTlm, Variant::SpeechOnly, Variant::MslamCtcNoText] {
        for s in SEEDS {
            let t0 = Instant::now();
            let mut tr = Pretrainer::new(desk_model(), desk_train(v, s), data).unwrap();
            let logs = tr.run(PRETRAIN_STEPS, None).unwrap();
            say!(
                "  pretrained {v} seed {s}: final loss {:.3} [{:.0}s]",
                logs.last().unwrap().total,
                t0.elapsed().as_secs_f64()
            );
            params.insert((v, s), tr.params);
        }
    }
    Encoders {
        model: Model::new(desk_model()).unwrap(),
        params,
    }
}

fn transfer(r: &mut Report, enc: &Encoders, corpus: &SynthCorpus, vocab: &CharVocab) {
    let t0 = Instant::now();
    let langs = ["aa", "bb"];
    let train = synth_classification(&corpus.world, &langs, N_CLASSES, 20, vocab, 100).unwrap();
    let dev = synth_classification(&corpus.world, &langs, N_CLASSES, 5, vocab, 101).unwrap();
    let test = synth_classification(&corpus.world, &langs, N_CLASSES, 25, vocab, 102).unwrap();
    let grid = Grid {
        batch_sizes: vec![16],
        lrs: vec![1e-2],
        projections: vec![true],
    };
    let mut mean: BTreeMap<Variant, TransferMatrix> = BTreeMap::new();
    for (&(v, s), p) in &enc.params {
        let base = ClassifierConfig {
            n_classes: N_CLASSES,
            epochs: 100,
            train_encoder: false,
            seed: s,
            ..ClassifierConfig::default()
        };
        let m = zero_shot_eval(&enc.model, p, &train, &dev, &test, &grid, &base).unwrap();
        say!("  {v} seed {s}: {m}");
        let acc = mean.entry(v).or_default();
        for tr in [Modality::Speech, Modality::Text] {
            for ev in [Modality::Speech, Modality::Text] {
                acc.set(tr, ev, acc.get(tr, ev) + m.get(tr, ev) / SEEDS.len() as f64);
            }
        }
    }
    for (v, m) in &mean {
        say!("  mean {v}: {m}");
    }
    let chance = 1.0 / N_CLASSES as f64;
    let s2t = |v| mean[&v].s2t;
    let ctc = s2t(Variant::MslamCtc);
    let tlm = s2t(Variant::MslamTlm);
    let so = s2t(Variant::SpeechOnly);
    let nt = s2t(Variant::MslamCtcNoText);
    r.record(
        5,
        t0,
        ctc >= 2.0 * chance && so <= 1.25 * chance && ctc > tlm,
        format!("S->T mslam-ctc {ctc:.3} (need >= {:.3}), speech-only {so:.3} (need <= {:.3}), mslam-tlm {tlm:.3}", 2.0 * chance, 1.25 * chance),
    );
    let t1 = Instant::now();
    r.record(
        6,
        t1,
        so < nt && nt < ctc,
        format!("S->T speech-only {so:.3} < mslam-ctc-no-text {nt:.3} < mslam-ctc {ctc:.3}"),
    );
    let t2 = Instant::now();
    let worst = mean.iter().map(|(v, m)| (m.t2s, *v)).fold((0.0, Variant::MslamCtc), |a, b| if b.0 > a.0 { b } else { a });
    let t2s: Vec<String> = mean.iter().map(|(v, m)| format!("{v} {:.3}", m.t2s)).collect();
    r.record(
        8,
        t2,
        worst.0 <= 1.25 * chance,
        format!("T->S {} (need all <= {:.3}; worst {})", t2s.join(", "), 1.25 * chance, worst.1),
    );
}

fn probe(r: &mut Report, enc: &Encoders, corpus: &SynthCorpus, vocab: &CharVocab) {
    let t0 = Instant::now();
    let ex: Vec<ProbeExample> = corpus.paired.iter().map(|p| ProbeExample::from_paired(p, vocab)).collect();
    let test: Vec<ProbeExample> = ex.iter().step_by(4).cloned().collect();
    let train: Vec<ProbeExample> = ex.iter().enumerate().filter(|(i, _)| i % 4 != 0).map(|e| e.1.clone()).collect();
    let cfg = ProbeConfig {
        steps: 400,
        lr: 1e-2,
        batch: 16,
        seed: 1,
    };
    let mut out = BTreeMap::new();
    let mut untouched = true;
    for v in [Variant::MslamCtc, Variant::MslamTlm] {
        let p = &enc.params[&(v, SEEDS[0])];
        let before = p.fingerprint();
        let (head, _) = fit_ctc_probe(&enc.model, p, &train, &cfg).unwrap();
        let asr = run_probe(&head, &enc.model, p, &test, Modality::Speech, vocab).unwrap().overall();
        let cae = run_probe(&head, &enc.model, p, &test, Modality::Text, vocab).unwrap().overall();
        untouched &= p.fingerprint() == before;
        out.insert(v, (asr, cae));
    }
    let (asr, cae) = out[&Variant::MslamCtc];
    let (tlm_asr, tlm_cae) = out[&Variant::MslamTlm];
    r.record(
        7,
        t0,
        asr < 0.10 && cae <= tlm_cae - 0.2 && untouched,
        format!("mslam-ctc ASR {asr:.3} CAE {cae:.3}; mslam-tlm ASR {tlm_asr:.3} CAE {tlm_cae:.3}; encoders unchanged: {untouched}"),
    );
}

#[test]
fn acceptance() {
    let mut r = Report { rows: Vec::new() };
    ctc_oracle(&mut r);
    mass_conservation(&mut r);
    gradients(&mut r);
    config_fidelity(&mut r);
    sampler_statistics(&mut r);

    let corpus = gen_synth(&SynthSpec::default(), 200, 1).unwrap();
    let vocab = corpus_vocab(&corpus, 64).unwrap();
    let data = PretrainData::from_synth(&corpus, &vocab);
    determinism(&mut r, &data);
    let enc = pretrain_all(&data);
    probe(&mut r, &enc, &corpus, &vocab);
    transfer(&mut r, &enc, &corpus, &vocab);

    r.rows.sort_by_key(|o| o.id);
    say!("\nsummary:");
    for o in &r.rows {
        let note = if !o.pass && KNOWN_FAILING.contains(&o.id) { " (known failure)" } else { "" };
        say!("criterion {:>2}: {}{note}", o.id, if o.pass { "PASS" } else { "FAIL" });
    }
    let unexpected: Vec<&Outcome> = r.rows.iter().filter(|o| !o.pass && !KNOWN_FAILING.contains(&o.id)).collect();
    assert!(
        unexpected.is_empty(),
        "failing: {:?}",
        unexpected.iter().map(|o| (o.id, &o.detail)).collect::<Vec<_>>()
    );
}
