//! Temperature-based language sampling and tri-stream batch composition.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{PairedExample, SpeechUtterance};
use crate::numerics::Tensor;
use crate::vocab::PAD;

pub const DEFAULT_TEMPERATURE: f64 = 3.0;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("no languages to sample from")]
    Empty,
    #[error("language `{0}` has a non-positive example count")]
    NonPositiveCount(String),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("language `{0}` has no records")]
    NoRecords(String),
    #[error("stream state does not match the stream's languages")]
    StateMismatch,
    #[error("batch needs {0} items but that stream is absent")]
    MissingStream(&'static str),
}

/// Normalized language → probability map.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageDistribution {
    probs: BTreeMap<String, f64>,
}

impl LanguageDistribution {
    pub fn get(&self, lang: &str) -> f64 {
        self.probs.get(lang).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.probs.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `p_l ∝ (n_l / Σn)^(1/T)`; larger `T` flattens toward uniform.
pub fn language_weights(counts: &BTreeMap<String, usize>, temperature: f64) -> Result<LanguageDistribution, SamplerError> {
    if counts.is_empty() {
        return Err(SamplerError::Empty);
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(SamplerError::BadTemperature(temperature));
    }
    if let Some((l, _)) = counts.iter().find(|(_, &n)| n == 0) {
        return Err(SamplerError::NonPositiveCount(l.clone()));
    }
    let total: f64 = counts.values().map(|&n| n as f64).sum();
    let raw: Vec<f64> = counts
        .values()
        .map(|&n| (n as f64 / total).powf(1.0 / temperature))
        .collect();
    let z: f64 = raw.iter().sum();
    Ok(LanguageDistribution {
        probs: counts.keys().cloned().zip(raw.into_iter().map(|r| r / z)).collect(),
    })
}

/// Resumable position of a [`LanguageStream`]: total draws and how many
/// records each language has handed out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamState {
    pub draws: u64,
    pub cursors: Vec<u64>,
}

impl StreamState {
    pub fn to_tensor(&self) -> Tensor {
        let mut v = vec![self.draws as f64];
        v.extend(self.cursors.iter().map(|&c| c as f64));
        Tensor::vector(v)
    }

    pub fn from_tensor(t: &Tensor) -> Option<Self> {
        let d = t.data();
        let to_u = |x: f64| (x >= 0.0 && x.fract() == 0.0).then_some(x as u64);
        let draws = to_u(*d.first()?)?;
        let cursors = d[1..].iter().map(|&x| to_u(x)).collect::<Option<_>>()?;
        Some(Self { draws, cursors })
    }
}

/// Infinite deterministic stream: each draw picks a language from the
/// distribution, then the next record of that language's current
/// shuffled epoch.
///
/// Draw `i` depends only on `(seed, i)` and the per-language cursors, so a
/// stream rebuilt from a saved [`StreamState`] continues identically.
#[derive(Clone, Debug)]
pub struct LanguageStream<T> {
    langs: Vec<String>,
    records: Vec<Vec<T>>,
    cumulative: Vec<f64>,
    seed: u64,
    state: StreamState,
    epoch_perm: Vec<Option<(u64, Vec<usize>)>>,
}

impl<T> LanguageStream<T> {
    pub fn new(grouped: BTreeMap<String, Vec<T>>, dist: &LanguageDistribution, seed: u64) -> Result<Self, SamplerError> {
        if dist.is_empty() {
            return Err(SamplerError::Empty);
        }
        let mut grouped = grouped;
        let mut langs = Vec::new();
        let mut records = Vec::new();
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for (lang, p) in dist.iter() {
            let recs = grouped.remove(lang).unwrap_or_default();
            if recs.is_empty() {
                return Err(SamplerError::NoRecords(lang.to_string()));
            }
            acc += p;
            langs.push(lang.to_string());
            records.push(recs);
            cumulative.push(acc);
        }
        let n = langs.len();
        Ok(Self {
            langs,
            records,
            cumulative,
            seed,
            state: StreamState {
                draws: 0,
                cursors: vec![0; n],
            },
            epoch_perm: vec![None; n],
        })
    }

    pub fn languages(&self) -> &[String] {
        &self.langs
    }

    pub fn state(&self) -> &StreamState {
        &self.state
    }

    pub fn restore(&mut self, state: StreamState) -> Result<(), SamplerError> {
        if state.cursors.len() != self.langs.len() {
            return Err(SamplerError::StateMismatch);
        }
        self.state = state;
        Ok(())
    }

    fn pick_language(&self, draw: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(u128::from(draw) * 2);
        let total = *self.cumulative.last().unwrap();
        let u: f64 = rng.gen::<f64>() * total;
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1)
    }

    fn record_index(&mut self, li: usize) -> usize {
        let n = self.records[li].len() as u64;
        let cursor = self.state.cursors[li];
        let epoch = cursor / n;
        let fresh = !matches!(&self.epoch_perm[li], Some((e, _)) if *e == epoch);
        if fresh {
            let mut perm: Vec<usize> = (0..n as usize).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(((li as u64 + 1) << 40) | epoch);
            perm.shuffle(&mut rng);
            self.epoch_perm[li] = Some((epoch, perm));
        }
        let perm = &self.epoch_perm[li].as_ref().unwrap().1;
        perm[(cursor % n) as usize]
    }

    /// Next `(language, record)`.
    pub fn next_item(&mut self) -> (&str, &T) {
        let li = self.pick_language(self.state.draws);
        let ri = self.record_index(li);
        self.state.draws += 1;
        self.state.cursors[li] += 1;
        (&self.langs[li], &self.records[li][ri])
    }
}

/// Text stream element: language plus encoded character ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TextItem {
    pub lang: String,
    pub ids: Vec<u32>,
}

/// Paired stream element: the example plus its encoded transcript.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedItem {
    pub example: PairedExample,
    pub ids: Vec<u32>,
}

/// One optimization step's input. Frame tensors and id rows are padded to
/// the per-stream maximum; masks mark valid positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TriModalBatch {
    pub speech: Vec<SpeechUtterance>,
    pub speech_mask: Vec<Vec<bool>>,
    pub text: Vec<Vec<u32>>,
    pub text_langs: Vec<String>,
    pub text_mask: Vec<Vec<bool>>,
    pub paired: Vec<PairedExample>,
    pub paired_speech_mask: Vec<Vec<bool>>,
    pub paired_ids: Vec<Vec<u32>>,
    pub paired_text_mask: Vec<Vec<bool>>,
}

impl TriModalBatch {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.speech.len(), self.text.len(), self.paired.len())
    }
}

/// Valid length of a prefix mask.
pub fn valid_len(mask: &[bool]) -> usize {
    mask.iter().take_while(|&&m| m).count()
}

fn pad_frames(frames: &Tensor, len: usize) -> (Tensor, Vec<bool>) {
    let (t, d) = (frames.rows(), frames.cols());
    let mut data = frames.data().to_vec();
    data.resize(len * d, 0.0);
    let mask = (0..len).map(|i| i < t).collect();
    (Tensor::new(vec![len, d], data).expect("padded shape"), mask)
}

fn pad_ids(ids: &[u32], len: usize) -> (Vec<u32>, Vec<bool>) {
    let mut out = ids.to_vec();
    out.resize(len, PAD);
    (out, (0..len).map(|i| i < ids.len()).collect())
}

/// Draws exactly `sizes = (speech, text, paired)` items. A stream may be
/// `None` only when its size is zero.
pub fn compose_batch(
    speech: Option<&mut LanguageStream<SpeechUtterance>>,
    text: Option<&mut LanguageStream<TextItem>>,
    paired: Option<&mut LanguageStream<PairedItem>>,
    sizes: (usize, usize, usize),
) -> Result<TriModalBatch, SamplerError> {
    let (ns, nt, np) = sizes;
    let mut speech_items: Vec<SpeechUtterance> = Vec::with_capacity(ns);
    if ns > 0 {
        let s = speech.ok_or(SamplerError::MissingStream("speech"))?;
        for _ in 0..ns {
            speech_items.push(s.next_item().1.clone());
        }
    }
    let mut text_items: Vec<TextItem> = Vec::with_capacity(nt);
    if nt > 0 {
        let s = text.ok_or(SamplerError::MissingStream("text"))?;
        for _ in 0..nt {
            text_items.push(s.next_item().1.clone());
        }
    }
    let mut paired_items: Vec<PairedItem> = Vec::with_capacity(np);
    if np > 0 {
        let s = paired.ok_or(SamplerError::MissingStream("paired"))?;
        for _ in 0..np {
            paired_items.push(s.next_item().1.clone());
        }
    }

    let max_s = speech_items.iter().map(|u| u.frames.rows()).max().unwrap_or(0);
    let (speech, speech_mask): (Vec<_>, Vec<_>) = speech_items
        .into_iter()
        .map(|mut u| {
            let (f, m) = pad_frames(&u.frames, max_s);
            u.frames = f;
            (u, m)
        })
        .unzip();

    let max_t = text_items.iter().map(|t| t.ids.len()).max().unwrap_or(0);
    let text_langs = text_items.iter().map(|t| t.lang.clone()).collect();
    let (text, text_mask) = text_items.iter().map(|t| pad_ids(&t.ids, max_t)).unzip();

    let max_pf = paired_items.iter().map(|p| p.example.frames.rows()).max().unwrap_or(0);
    let max_pt = paired_items.iter().map(|p| p.ids.len()).max().unwrap_or(0);
    let mut paired = Vec::with_capacity(np);
    let mut paired_speech_mask = Vec::with_capacity(np);
    let mut paired_ids = Vec::with_capacity(np);
    let mut paired_text_mask = Vec::with_capacity(np);
    for item in paired_items {
        let mut ex = item.example;
        let (f, m) = pad_frames(&ex.frames, max_pf);
        ex.frames = f;
        paired.push(ex);
        paired_speech_mask.push(m);
        let (ids, m) = pad_ids(&item.ids, max_pt);
        paired_ids.push(ids);
        paired_text_mask.push(m);
    }
    Ok(TriModalBatch {
        speech,
        speech_mask,
        text,
        text_langs,
        text_mask,
        paired,
        paired_speech_mask,
        paired_ids,
        paired_text_mask,
    })
}

/// Groups records by language, preserving order within each language.
pub fn group_by_language<T, F: Fn(&T) -> &str>(items: Vec<T>, lang: F) -> BTreeMap<String, Vec<T>> {
    let mut out: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for it in items {
        out.entry(lang(&it).to_string()).or_default().push(it);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn cube_root_example() {
        let d = language_weights(&counts(&[("A", 8), ("B", 1)]), 3.0).unwrap();
        assert!((d.get("A") - 2.0 / 3.0).abs() < 1e-12);
        assert!((d.get("B") - 1.0 / 3.0).abs() < 1e-12);
        let d = language_weights(&counts(&[("A", 8), ("B", 1)]), 1.0).unwrap();
        assert!((d.get("A") - 8.0 / 9.0).abs() < 1e-12);
        let d = language_weights(&counts(&[("A", 5), ("B", 5), ("C", 5)]), 7.0).unwrap();
        assert!(d.iter().all(|(_, p)| (p - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn weight_errors() {
        assert_eq!(language_weights(&BTreeMap::new(), 3.0), Err(SamplerError::Empty));
        assert!(language_weights(&counts(&[("A", 0)]), 3.0).is_err());
        assert!(language_weights(&counts(&[("A", 1)]), 0.0).is_err());
    }

    #[test]
    fn monotone_flattening() {
        let c = counts(&[("A", 100), ("B", 10), ("C", 1)]);
        let d = language_weights(&c, 3.0).unwrap();
        assert!(d.get("A") < 100.0 / 111.0);
        assert!(d.get("C") > 1.0 / 111.0);
    }

    fn stream(seed: u64) -> LanguageStream<u32> {
        let mut g = BTreeMap::new();
        g.insert("A".to_string(), (0..7).collect::<Vec<u32>>());
        g.insert("B".to_string(), (100..103).collect());
        let d = language_weights(&counts(&[("A", 8), ("B", 1)]), 3.0).unwrap();
        LanguageStream::new(g, &d, seed).unwrap()
    }

    #[test]
    fn single_language_round_robin() {
        let mut g = BTreeMap::new();
        g.insert("A".to_string(), vec![1u32, 2, 3, 4]);
        let d = language_weights(&counts(&[("A", 4)]), 3.0).unwrap();
        let mut s = LanguageStream::new(g, &d, 5).unwrap();
        for _ in 0..3 {
            let mut epoch: Vec<u32> = (0..4).map(|_| *s.next_item().1).collect();
            epoch.sort();
            assert_eq!(epoch, vec![1, 2, 3, 4]);
        }
    }

    #[test]
    fn missing_language_records_rejected() {
        let d = language_weights(&counts(&[("A", 4), ("B", 1)]), 3.0).unwrap();
        let mut g = BTreeMap::new();
        g.insert("A".to_string(), vec![1u32]);
        assert_eq!(
            LanguageStream::new(g, &d, 0).unwrap_err(),
            SamplerError::NoRecords("B".into())
        );
    }

    #[test]
    fn deterministic_and_resumable() {
        let mut a = stream(42);
        let mut b = stream(42);
        let xs: Vec<u32> = (0..10_000).map(|_| *a.next_item().1).collect();
        let ys: Vec<u32> = (0..10_000).map(|_| *b.next_item().1).collect();
        assert_eq!(xs, ys);

        let mut c = stream(42);
        for _ in 0..1234 {
            c.next_item();
        }
        let saved = StreamState::from_tensor(&c.state().to_tensor()).unwrap();
        let mut d = stream(42);
        d.restore(saved).unwrap();
        let zs: Vec<u32> = (0..500).map(|_| *d.next_item().1).collect();
        assert_eq!(&zs[..], &xs[1234..1734]);
    }

    #[test]
    fn empirical_frequency_matches() {
        let mut s = stream(9);
        let n = 30_000;
        let a = (0..n).filter(|_| s.next_item().0 == "A").count();
        assert!((a as f64 / n as f64 - 2.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn batch_sizes_exact_and_padded() {
        let mk = |lang: &str, len: usize| SpeechUtterance {
            id: format!("{lang}{len}"),
            lang: lang.into(),
            frames: Tensor::new(vec![len, 2], vec![1.0; len * 2]).unwrap(),
        };
        let mut g = BTreeMap::new();
        g.insert("A".to_string(), vec![mk("A", 3), mk("A", 5)]);
        let d = language_weights(&counts(&[("A", 2)]), 3.0).unwrap();
        let mut sp = LanguageStream::new(g, &d, 1).unwrap();
        let mut tg = BTreeMap::new();
        tg.insert(
            "A".to_string(),
            vec![TextItem {
                lang: "A".into(),
                ids: vec![7, 8],
            }],
        );
        let mut tx = LanguageStream::new(tg, &d, 1).unwrap();
        let b = compose_batch(Some(&mut sp), Some(&mut tx), None, (8, 32, 0)).unwrap();
        assert_eq!(b.sizes(), (8, 32, 0));
        for (u, m) in b.speech.iter().zip(&b.speech_mask) {
            assert_eq!(u.frames.rows(), 5);
            assert_eq!(m.len(), 5);
        }
        let b = compose_batch(Some(&mut sp), None, None, (4, 0, 0)).unwrap();
        assert!(b.text.is_empty() && b.paired.is_empty());
        assert_eq!(
            compose_batch(Some(&mut sp), None, None, (1, 1, 0)).unwrap_err(),
            SamplerError::MissingStream("text")
        );
    }
}
