use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use mslam_core::corpus::{gen_synth, SynthCorpus};
use mslam_core::evalkit::{
    classifier_accuracy, finetune_classifier, finetune_seq2seq, synth_classification, synth_translation,
    zero_shot_eval, LabeledExample, TranslationMap,
};
use mslam_core::gradsuite::grad_suite;
use mslam_core::model::{init_params, Modality, Model};
use mslam_core::numerics::{read_container, ParamStore};
use mslam_core::probe::{fit_ctc_probe, report, run_probe, ProbeExample};
use mslam_core::trainer::{corpus_vocab, PretrainData, Pretrainer, StepLog};
use mslam_core::vocab::CharVocab;

use crate::config::{RunConfig, Task};
use crate::rundir::RunDir;

/// Gradient checks above this relative error fail the command.
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub struct Ctx<'a> {
    pub command: &'a str,
    pub config_path: Option<&'a Path>,
    pub cfg: RunConfig,
}

impl Ctx<'_> {
    fn manifest(&self) -> String {
        let c = &self.cfg;
        let t = &c.train;
        let (s, x, p) = t.variant.batch_sizes(t.batch);
        let w = t.variant.weights(t.weights);
        let mut m = String::new();
        let _ = writeln!(m, "command = {}", self.command);
        let _ = writeln!(m, "version = {}", env!("CARGO_PKG_VERSION"));
        if let Some(path) = self.config_path {
            let _ = writeln!(m, "config = {}", path.display());
        }
        let _ = writeln!(m, "config_sha256 = {}", c.hash);
        let _ = writeln!(m, "seed = {}", t.seed);
        let _ = writeln!(m, "data_seed = {}", c.data.seed);
        let _ = writeln!(m, "variant = {}", t.variant);
        let _ = writeln!(m, "model_preset = {}", c.model.preset);
        let _ = writeln!(m, "param_count = {}", c.model.param_count());
        let _ = writeln!(m, "batch = {s},{x},{p}");
        let _ = writeln!(m, "loss_weights = {},{},{},{}", w.speech, w.text, w.tlm, w.paired_ctc);
        if let Some(ck) = &c.checkpoint {
            let _ = writeln!(m, "encoder_checkpoint = {}", ck.display());
        }
        m
    }

    fn corpus(&self) -> Result<(SynthCorpus, CharVocab)> {
        let d = &self.cfg.data;
        let corpus = gen_synth(&d.spec, d.sentences, d.seed)?;
        let vocab = corpus_vocab(&corpus, self.cfg.model.vocab_size)?;
        Ok((corpus, vocab))
    }

    fn vocab_tsv(vocab: &CharVocab) -> Result<String> {
        let mut buf = Vec::new();
        vocab.write_tsv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("vocab is utf-8"))
    }

    /// Encoder weights from `encoder.checkpoint`, or a fresh in-process
    /// pre-training run of `train.total_steps` steps.
    fn encoder(&self, corpus: &SynthCorpus, vocab: &CharVocab) -> Result<(Model, ParamStore)> {
        let model = Model::new(self.cfg.model.clone())?;
        match &self.cfg.checkpoint {
            Some(path) => Ok((model.clone(), load_encoder(&model, path)?)),
            None => {
                let data = PretrainData::from_synth(corpus, vocab);
                let mut tr = Pretrainer::new(self.cfg.model.clone(), self.cfg.train.clone(), &data)?;
                pretrain_loop(&mut tr, None::<std::io::Sink>)?;
                Ok((model, tr.params))
            }
        }
    }
}

/// Model parameters from a checkpoint; optimizer and sampler entries are
/// ignored. Every parameter must be present with the configured shape.
pub fn load_encoder(model: &Model, path: &Path) -> Result<ParamStore> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let entries = read_container(std::io::BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
    let mut params = init_params(&model.cfg, 0)?;
    let mut seen = BTreeSet::new();
    for (name, t) in entries {
        if let Ok(slot) = params.get_mut(&name) {
            if slot.shape() != t.shape() {
                bail!("checkpoint {name} has shape {:?}, config expects {:?}", t.shape(), slot.shape());
            }
            *slot = t;
            seen.insert(name);
        }
    }
    if let Some(missing) = params.names().find(|n| !seen.contains(*n)) {
        bail!("checkpoint {} lacks parameter {missing}", path.display());
    }
    Ok(params)
}

fn pretrain_loop<W: Write>(tr: &mut Pretrainer, mut log: Option<W>) -> Result<StepLog> {
    let total = tr.cfg.total_steps;
    let mut last = None;
    while tr.step < total {
        let n = (total - tr.step).min(100);
        let logs = tr.run(n, log.as_mut().map(|w| w as &mut dyn Write))?;
        let mean = logs.iter().map(|l| l.total).sum::<f64>() / logs.len() as f64;
        info!("step {} / {total}: mean loss {mean:.4}", tr.step);
        last = logs.last().cloned();
    }
    last.context("train.total_steps is zero")
}

pub fn build_vocab(ctx: &Ctx, run: &RunDir) -> Result<String> {
    let (_, vocab) = ctx.corpus()?;
    run.write("vocab.tsv", &Ctx::vocab_tsv(&vocab)?)?;
    run.write("manifest.txt", &ctx.manifest())?;
    Ok(format!("vocab: {} of {} entries used", vocab.used(), vocab.size()))
}

pub fn gen_synth_cmd(ctx: &Ctx, run: &RunDir) -> Result<String> {
    let (corpus, vocab) = ctx.corpus()?;
    corpus.write(run.path())?;
    run.write("vocab.tsv", &Ctx::vocab_tsv(&vocab)?)?;
    run.write("manifest.txt", &ctx.manifest())?;
    Ok(format!(
        "corpus: {} speech, {} text, {} paired",
        corpus.speech.len(),
        corpus.text.len(),
        corpus.paired.len()
    ))
}

pub fn pretrain(ctx: &Ctx, run: &RunDir) -> Result<String> {
    let (corpus, vocab) = ctx.corpus()?;
    let data = PretrainData::from_synth(&corpus, &vocab);
    let mut tr = Pretrainer::new(ctx.cfg.model.clone(), ctx.cfg.train.clone(), &data)?;
    let mut w = BufWriter::new(File::create(run.file("log.tsv"))?);
    writeln!(w, "{}", StepLog::HEADER)?;
    let last = pretrain_loop(&mut tr, Some(&mut w))?;
    w.flush()?;
    tr.save_checkpoint(&run.file("checkpoint.bin"))?;
    run.write("vocab.tsv", &Ctx::vocab_tsv(&vocab)?)?;
    run.write("manifest.txt", &ctx.manifest())?;
    Ok(format!("{}\n{last}", StepLog::HEADER))
}

struct ClassData {
    train: Vec<LabeledExample>,
    dev: Vec<LabeledExample>,
    test: Vec<LabeledExample>,
}

fn class_data(ctx: &Ctx, corpus: &SynthCorpus, vocab: &CharVocab) -> Result<ClassData> {
    let c = &ctx.cfg.classify;
    let langs: Vec<&str> = c.langs.iter().map(String::as_str).collect();
    let s = ctx.cfg.data.seed;
    let make = |per: usize, off: u64| synth_classification(&corpus.world, &langs, c.base.n_classes, per, vocab, s + off);
    Ok(ClassData {
        train: make(c.train_per_class, 100)?,
        dev: make(c.dev_per_class, 101)?,
        test: make(c.test_per_class, 102)?,
    })
}

pub fn finetune(ctx: &Ctx, run: &RunDir) -> Result<String> {
    let (corpus, vocab) = ctx.corpus()?;
    let (model, enc) = ctx.encoder(&corpus, &vocab)?;
    let mut out = String::new();
    match ctx.cfg.task {
        Task::Classify => {
            let c = &ctx.cfg.classify;
            let d = class_data(ctx, &corpus, &vocab)?;
            let fit = finetune_classifier(&model, &enc, &d.train, &d.dev, &d.test, Modality::Speech, &c.grid, &c.base)?;
            let text = classifier_accuracy(&model, &fit.params, &d.test, Modality::Text, c.base.n_classes)?;
            out.push_str("batch\tlr\tprojection\tdev_accuracy\n");
            for (p, acc) in &fit.scores {
                let _ = writeln!(out, "{}\t{:e}\t{}\t{acc:.4}", p.batch_size, p.lr, p.projection);
            }
            let _ = writeln!(out, "\nbest\t{}\t{:e}\t{}", fit.best.batch_size, fit.best.lr, fit.best.projection);
            let _ = writeln!(out, "test_speech\t{:.4}", fit.test_accuracy.unwrap_or(f64::NAN));
            let _ = writeln!(out, "test_text\t{text:.4}");
        }
        Task::Translate => {
            let t = &ctx.cfg.translate;
            let s = ctx.cfg.data.seed;
            let map = match &t.tgt {
                Some(tgt) => Some(TranslationMap::new(&corpus.world, &t.src, tgt, s)?),
                None => None,
            };
            let st = synth_translation(&corpus.world, &t.src, map.as_ref(), t.n_train, &vocab, s + 200)?;
            let mt = if t.joint_mt {
                Some(synth_translation(&corpus.world, &t.src, map.as_ref(), t.n_train, &vocab, s + 201)?)
            } else {
                None
            };
            let test = synth_translation(&corpus.world, &t.src, map.as_ref(), t.n_test, &vocab, s + 202)?;
            let res = finetune_seq2seq(&model, &enc, &st, mt.as_deref(), &t.s2s)?;
            out.push_str("input\ttoken_accuracy\texact_match\n");
            for (name, m) in [("speech", Modality::Speech), ("text", Modality::Text)] {
                let sc = res.model.score(&test, m)?;
                let _ = writeln!(out, "{name}\t{:.4}\t{:.4}", sc.token_accuracy, sc.exact_match);
            }
            if let Some((a, b)) = res.losses.last() {
                let _ = writeln!(out, "\nfinal_loss\t{a:.6}\t{b:.6}");
            }
        }
    }
    run.write("metrics.tsv", &out)?;
    run.write("manifest.txt", &ctx.manifest())?;
    Ok(out)
}

pub fn probe(ctx: &Ctx, run: &RunDir) -> Result<String> {
    let (corpus, vocab) = ctx.corpus()?;
    let (model, enc) = ctx.encoder(&corpus, &vocab)?;
    let ex: Vec<ProbeExample> = corpus.paired.iter().map(|p| ProbeExample::from_paired(p, &vocab)).collect();
    let (test, train): (Vec<_>, Vec<_>) = ex.into_iter().enumerate().partition(|(i, _)| i % 4 == 0);
    let test: Vec<ProbeExample> = test.into_iter().map(|e| e.1).collect();
    let train: Vec<ProbeExample> = train.into_iter().map(|e| e.1).collect();
    let (head, losses) = fit_ctc_probe(&model, &enc, &train, &ctx.cfg.probe)?;
    info!("probe loss {:.4} -> {:.4}", losses[0], losses[losses.len() - 1]);
    let asr = run_probe(&head, &model, &enc, &test, Modality::Speech, &vocab)?;
    let cae = run_probe(&head, &model, &enc, &test, Modality::Text, &vocab)?;
    let mut out = report(&asr, &cae, ctx.cfg.probe_samples);
    let _ = writeln!(out, "\noverall\t{:.4}\t{:.4}", asr.overall(), cae.overall());
    run.write("report.tsv", &out)?;
    run.write("manifest.txt", &ctx.manifest())?;
    Ok(out)
}

pub fn eval_matrix(ctx: &Ctx, run: &RunDir) -> Result<String> {
    let (corpus, vocab) = ctx.corpus()?;
    let (model, enc) = ctx.encoder(&corpus, &vocab)?;
    let c = &ctx.cfg.classify;
    let d = class_data(ctx, &corpus, &vocab)?;
    let m = zero_shot_eval(&model, &enc, &d.train, &d.dev, &d.test, &c.grid, &c.base)?;
    let out = m.to_tsv(&ctx.cfg.train.variant.to_string());
    run.write("matrix.tsv", &out)?;
    run.write("manifest.txt", &ctx.manifest())?;
    Ok(out)
}

/// Runs the finite-difference suite; the report goes to stdout and, with
/// an output directory, to `gradcheck.tsv`.
pub fn grad_check(ctx: &Ctx, run: Option<&RunDir>) -> Result<String> {
    let checks = grad_suite(ctx.cfg.train.seed, ctx.cfg.gradcheck_coords)?;
    let mut out = String::from("loss\tmax_rel_err\tcoords\tnonzero\n");
    for c in &checks {
        let _ = writeln!(out, "{}\t{:.3e}\t{}\t{}", c.name, c.max_rel_err, c.coords, c.nonzero);
    }
    if let Some(run) = run {
        run.write("gradcheck.tsv", &out)?;
        run.write("manifest.txt", &ctx.manifest())?;
    }
    if let Some(bad) = checks.iter().find(|c| !(c.max_rel_err < GRAD_TOLERANCE)) {
        print!("{out}");
        bail!("{} gradient check failed: relative error {:e}", bad.name, bad.max_rel_err);
    }
    Ok(out)
}
