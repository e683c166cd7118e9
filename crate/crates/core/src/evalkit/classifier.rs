use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{encode_on_tape, frozen_features, EvalError, Input, LabeledExample};
use crate::losses::mlm_loss;
use crate::model::{Modality, Model};
use crate::numerics::{Bound, ParamStore, Tape, Tensor, Var};
use crate::trainer::Adam;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub n_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-position `model_dim` projection before pooling.
    pub projection: bool,
    /// Update encoder weights too; otherwise only the head trains.
    pub train_encoder: bool,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            n_classes: 2,
            epochs: 10,
            batch_size: 32,
            lr: 2e-5,
            projection: false,
            train_encoder: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub batch_size: usize,
    pub lr: f64,
    pub projection: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub batch_sizes: Vec<usize>,
    pub lrs: Vec<f64>,
    pub projections: Vec<bool>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            batch_sizes: vec![16, 32, 64],
            lrs: vec![2e-6, 4e-6, 2e-5, 4e-5],
            projections: vec![false, true],
        }
    }
}

impl Grid {
    pub fn single(p: GridPoint) -> Self {
        Self {
            batch_sizes: vec![p.batch_size],
            lrs: vec![p.lr],
            projections: vec![p.projection],
        }
    }

    /// Points in lexicographic (batch, lr, projection) order.
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &batch_size in &self.batch_sizes {
            for &lr in &self.lrs {
                for &projection in &self.projections {
                    out.push(GridPoint {
                        batch_size,
                        lr,
                        projection,
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierOutcome {
    pub best: GridPoint,
    pub dev_accuracy: f64,
    pub test_accuracy: Option<f64>,
    /// Encoder plus `cls.*` head parameters of the best point.
    pub params: ParamStore,
    pub scores: Vec<(GridPoint, f64)>,
}

fn init_head(store: &mut ParamStore, d: usize, classes: usize, projection: bool, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1A5);
    let mut draw = |n: usize, fan: usize| -> Vec<f64> {
        let nd = Normal::new(0.0, 1.0 / (fan as f64).sqrt()).expect("finite std");
        (0..n).map(|_| nd.sample(&mut rng)).collect()
    };
    if projection {
        store.insert("cls.proj.w", Tensor::new(vec![d, d], draw(d * d, d)).expect("shape"));
        store.insert("cls.proj.b", Tensor::zeros(vec![d]));
    }
    store.insert("cls.w", Tensor::new(vec![d, classes], draw(d * classes, d)).expect("shape"));
    store.insert("cls.b", Tensor::zeros(vec![classes]));
}

/// Max-pooled, optionally projected logits for one sequence `[T, D]`.
fn head_logits(tape: &mut Tape, p: &mut Bound, feats: &[Var]) -> Result<Var, EvalError> {
    let proj = p.store().contains("cls.proj.w");
    let mut pooled = Vec::with_capacity(feats.len());
    for &f in feats {
        let mut x = f;
        if proj {
            let w = p.get(tape, "cls.proj.w")?;
            let b = p.get(tape, "cls.proj.b")?;
            let y = tape.matmul(x, w)?;
            x = tape.add_row(y, b)?;
        }
        pooled.push(tape.max_pool_rows(x)?);
    }
    let x = if pooled.len() == 1 { pooled[0] } else { tape.concat_rows(&pooled)? };
    let w = p.get(tape, "cls.w")?;
    let b = p.get(tape, "cls.b")?;
    let z = tape.matmul(x, w)?;
    Ok(tape.add_row(z, b)?)
}

fn check_labels(data: &[LabeledExample], classes: usize) -> Result<(), EvalError> {
    if classes < 2 {
        return Err(EvalError::InvalidConfig("need at least two classes".into()));
    }
    if let Some(e) = data.iter().find(|e| e.label >= classes) {
        return Err(EvalError::BadLabel {
            label: e.label,
            classes,
        });
    }
    Ok(())
}

/// Trains encoder (optionally) and head with cross-entropy on one
/// modality; returns encoder plus head parameters.
pub fn train_classifier(
    model: &Model,
    encoder: &ParamStore,
    train: &[LabeledExample],
    modality: Modality,
    cfg: &ClassifierConfig,
) -> Result<ParamStore, EvalError> {
    if train.is_empty() {
        return Err(EvalError::NoData("training"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(EvalError::InvalidConfig("batch size and lr must be positive".into()));
    }
    check_labels(train, cfg.n_classes)?;
    let inputs: Vec<Input> = train
        .iter()
        .enumerate()
        .map(|(i, e)| Input::of(e, modality, i))
        .collect::<Result<_, _>>()?;
    let frozen = if cfg.train_encoder {
        None
    } else {
        Some(frozen_features(model, encoder, &inputs)?)
    };
    let mut params = encoder.clone();
    init_head(&mut params, model.cfg.model_dim, cfg.n_classes, cfg.projection, cfg.seed);
    let mut adam = Adam::new(0.9, 0.98, 1e-9);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut p = params.bind(&[]);
            let feats = match &frozen {
                Some(f) => batch.iter().map(|&i| tape.leaf(&f[i])).collect(),
                None => {
                    let ins: Vec<Input> = batch.iter().map(|&i| inputs[i]).collect();
                    encode_on_tape(model, &mut tape, &mut p, &ins)?
                }
            };
            let logits = head_logits(&mut tape, &mut p, &feats)?;
            let lp = tape.log_softmax(logits);
            let targets: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let loss = mlm_loss(&mut tape, lp, &targets)?;
            let grads = p.gradients(&tape.backward(loss)?);
            adam.update(&mut params, &grads, cfg.lr)?;
        }
    }
    Ok(params)
}

/// Fraction of examples whose argmax class (ties to the lowest) matches.
pub fn classifier_accuracy(
    model: &Model,
    params: &ParamStore,
    data: &[LabeledExample],
    modality: Modality,
    n_classes: usize,
) -> Result<f64, EvalError> {
    if data.is_empty() {
        return Err(EvalError::NoData("evaluation"));
    }
    check_labels(data, n_classes)?;
    let inputs: Vec<Input> = data
        .iter()
        .enumerate()
        .map(|(i, e)| Input::of(e, modality, i))
        .collect::<Result<_, _>>()?;
    let feats = frozen_features(model, params, &inputs)?;
    let mut correct = 0usize;
    for (chunk, labels) in feats.chunks(64).zip(data.chunks(64)) {
        let mut tape = Tape::new();
        let mut p = params.bind(&[""]);
        let vars: Vec<Var> = chunk.iter().map(|f| tape.leaf(f)).collect();
        let logits = head_logits(&mut tape, &mut p, &vars)?;
        let z = tape.value(logits);
        let c = tape.cols(logits);
        for (r, e) in labels.iter().enumerate() {
            let row = &z[r * c..(r + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            correct += usize::from(best == e.label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains one classifier per grid point, picks the best on dev (ties to
/// the earlier point) and scores it on test when given.
#[allow(clippy::too_many_arguments)]
pub fn finetune_classifier(
    model: &Model,
    encoder: &ParamStore,
    train: &[LabeledExample],
    dev: &[LabeledExample],
    test: &[LabeledExample],
    modality: Modality,
    grid: &Grid,
    base: &ClassifierConfig,
) -> Result<ClassifierOutcome, EvalError> {
    let points = grid.points();
    if points.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    if dev.is_empty() {
        return Err(EvalError::NoData("dev"));
    }
    let mut best: Option<(GridPoint, f64, ParamStore)> = None;
    let mut scores = Vec::with_capacity(points.len());
    for pt in points {
        let cfg = ClassifierConfig {
            batch_size: pt.batch_size,
            lr: pt.lr,
            projection: pt.projection,
            ..*base
        };
        let params = train_classifier(model, encoder, train, modality, &cfg)?;
        let acc = classifier_accuracy(model, &params, dev, modality, cfg.n_classes)?;
        scores.push((pt, acc));
        if best.as_ref().map_or(true, |b| acc > b.1) {
            best = Some((pt, acc, params));
        }
    }
    let (best, dev_accuracy, params) = best.expect("non-empty grid");
    let test_accuracy = if test.is_empty() {
        None
    } else {
        Some(classifier_accuracy(model, &params, test, modality, base.n_classes)?)
    };
    Ok(ClassifierOutcome {
        best,
        dev_accuracy,
        test_accuracy,
        params,
        scores,
    })
}
