use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EvalError, LabeledExample, SeqExample};
use crate::corpus::SynthWorld;
use crate::vocab::{CharVocab, DEFAULT_TEXT_CAP};

/// Splits a language's alphabet into `n_classes` class characters and
/// the remaining filler characters.
pub fn class_chars(world: &SynthWorld, lang: &str, n_classes: usize) -> Result<(Vec<char>, Vec<char>), EvalError> {
    let alphabet = world.alphabet(lang);
    if alphabet.len() < n_classes + 2 {
        return Err(EvalError::InvalidConfig(format!(
            "language {lang:?} has {} characters, need {}",
            alphabet.len(),
            n_classes + 2
        )));
    }
    Ok((alphabet[..n_classes].to_vec(), alphabet[n_classes..].to_vec()))
}

/// Character-presence classification: every sentence holds exactly one
/// class character among fillers; the label is that character's index.
/// Labels are shared across languages and balanced within each.
pub fn synth_classification(
    world: &SynthWorld,
    langs: &[&str],
    n_classes: usize,
    per_class: usize,
    vocab: &CharVocab,
    seed: u64,
) -> Result<Vec<LabeledExample>, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (world.spec.min_len.max(2), world.spec.max_len.max(2));
    let mut out = Vec::with_capacity(langs.len() * n_classes * per_class);
    for &lang in langs {
        let (classes, fillers) = class_chars(world, lang, n_classes)?;
        for (label, &c) in classes.iter().enumerate() {
            for _ in 0..per_class {
                let len = rng.gen_range(lo..=hi);
                let mut chars: Vec<char> = Vec::with_capacity(len);
                while chars.len() < len - 1 {
                    let f = *fillers.choose(&mut rng).expect("fillers");
                    if chars.last() != Some(&f) {
                        chars.push(f);
                    }
                }
                let at = rng.gen_range(0..len);
                chars.insert(at, c);
                let text: String = chars.into_iter().collect();
                let frames = world
                    .render(&text, &mut rng)
                    .map_err(|e| EvalError::InvalidConfig(e.to_string()))?;
                out.push(LabeledExample {
                    lang: lang.to_string(),
                    frames: Some(frames),
                    ids: Some(vocab.encode(&text, DEFAULT_TEXT_CAP)),
                    label,
                });
            }
        }
    }
    Ok(out)
}

/// A seeded bijection from a source alphabet onto a target alphabet,
/// applied character-wise to the reversed source.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationMap {
    pub map: BTreeMap<char, char>,
}

impl TranslationMap {
    pub fn new(world: &SynthWorld, src: &str, tgt: &str, seed: u64) -> Result<Self, EvalError> {
        let a = world.alphabet(src);
        let mut b = world.alphabet(tgt).to_vec();
        if a.is_empty() || a.len() != b.len() {
            return Err(EvalError::InvalidConfig("alphabets must be non-empty and of equal size".into()));
        }
        b.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            map: a.iter().copied().zip(b).collect(),
        })
    }

    pub fn apply(&self, s: &str) -> String {
        s.chars().rev().map(|c| self.map.get(&c).copied().unwrap_or(c)).collect()
    }
}

/// `n` source sentences in `src` with speech and text, each paired with
/// its mapped target string. With `map = None` the target is the
/// transcript itself (the copy task).
pub fn synth_translation(
    world: &SynthWorld,
    src: &str,
    map: Option<&TranslationMap>,
    n: usize,
    vocab: &CharVocab,
    seed: u64,
) -> Result<Vec<SeqExample>, EvalError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let s = world.sentence(src, &mut rng);
        let frames = world
            .render(&s, &mut rng)
            .map_err(|e| EvalError::InvalidConfig(e.to_string()))?;
        let target = map.map_or_else(|| s.clone(), |m| m.apply(&s));
        out.push(SeqExample {
            lang: src.to_string(),
            frames: Some(frames),
            source_ids: Some(vocab.encode(&s, DEFAULT_TEXT_CAP)),
            target: vocab.encode(&target, DEFAULT_TEXT_CAP),
        });
    }
    Ok(out)
}
