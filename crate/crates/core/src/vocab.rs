//! Character vocabulary shared by text masked prediction and CTC.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const BLANK: u32 = 3;
pub const BOS: u32 = 4;
pub const EOS: u32 = 5;
pub const NUM_RESERVED: usize = 6;
pub const DEFAULT_VOCAB_SIZE: usize = 4096;
pub const DEFAULT_TEXT_CAP: usize = 512;

const RESERVED_NAMES: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<mask>", "<blank>", "<bos>", "<eos>"];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary size {0} leaves no room beyond the {NUM_RESERVED} reserved tokens")]
    TooSmall(usize),
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token id {id} outside vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("vocab file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("vocab i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Immutable character ↔ id table. Slots past the used entries are valid
/// ids (the softmax spans `size`) that decode to nothing.
#[derive(Clone, Debug, PartialEq)]
pub struct CharVocab {
    char_to_id: HashMap<char, u32>,
    id_to_char: Vec<Option<char>>,
    counts: Vec<u64>,
    size: usize,
}

impl CharVocab {
    /// Fills the non-reserved slots with the most frequent characters,
    /// ties broken by ascending code point.
    pub fn build<'a, I>(corpus: I, size: usize) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        if size <= NUM_RESERVED {
            return Err(VocabError::TooSmall(size));
        }
        let mut counts: BTreeMap<char, u64> = BTreeMap::new();
        let mut seen_any = false;
        for (_lang, text) in corpus {
            seen_any = true;
            for c in text.chars() {
                *counts.entry(c).or_default() += 1;
            }
        }
        if !seen_any || counts.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }
        let mut ranked: Vec<(char, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(size - NUM_RESERVED);
        Ok(Self::from_ranked(&ranked, size))
    }

    fn from_ranked(ranked: &[(char, u64)], size: usize) -> Self {
        let mut id_to_char = vec![None; size];
        let mut counts = vec![0; size];
        let mut char_to_id = HashMap::new();
        for (i, &(c, n)) in ranked.iter().enumerate() {
            let id = NUM_RESERVED + i;
            id_to_char[id] = Some(c);
            counts[id] = n;
            char_to_id.insert(c, id as u32);
        }
        Self {
            char_to_id,
            id_to_char,
            counts,
            size,
        }
    }

    /// Softmax width, including reserved and unused slots.
    pub fn size(&self) -> usize {
        self.size
    }

    /// Reserved tokens plus assigned characters.
    pub fn used(&self) -> usize {
        NUM_RESERVED + self.char_to_id.len()
    }

    pub fn id(&self, c: char) -> Option<u32> {
        self.char_to_id.get(&c).copied()
    }

    pub fn char_of(&self, id: u32) -> Option<char> {
        self.id_to_char.get(id as usize).copied().flatten()
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    /// Non-reserved ids that carry a character.
    pub fn char_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (NUM_RESERVED as u32..self.used() as u32).filter(|&i| self.id_to_char[i as usize].is_some())
    }

    /// Maps characters to ids (unknown → `UNK`), keeping at most `cap`.
    pub fn encode(&self, text: &str, cap: usize) -> Vec<u32> {
        text.chars()
            .take(cap)
            .map(|c| self.id(c).unwrap_or(UNK))
            .collect()
    }

    /// Renders ids back to text. Control tokens and unused slots render
    /// empty; `UNK` renders as U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String, VocabError> {
        let mut s = String::with_capacity(ids.len());
        for &id in ids {
            if id as usize >= self.size {
                return Err(VocabError::IdOutOfRange { id, size: self.size });
            }
            if id == UNK {
                s.push(char::REPLACEMENT_CHARACTER);
            } else if let Some(c) = self.id_to_char[id as usize] {
                s.push(c);
            }
        }
        Ok(s)
    }

    /// `id<TAB>char<TAB>count` per entry. Characters are written as
    /// `U+XXXX`; reserved entries use their `<name>` and come first.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<(), VocabError> {
        for (i, name) in RESERVED_NAMES.iter().enumerate() {
            writeln!(w, "{i}\t{name}\t0")?;
        }
        for id in self.char_ids() {
            let c = self.id_to_char[id as usize].unwrap();
            writeln!(w, "{id}\tU+{:04X}\t{}", c as u32, self.counts[id as usize])?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R, size: usize) -> Result<Self, VocabError> {
        if size <= NUM_RESERVED {
            return Err(VocabError::TooSmall(size));
        }
        let mut ranked = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = n + 1;
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            let err = |msg: &str| VocabError::Parse {
                line: lineno,
                msg: msg.to_string(),
            };
            if parts.len() != 3 {
                return Err(err("expected 3 tab-separated fields"));
            }
            let id: usize = parts[0].parse().map_err(|_| err("bad id"))?;
            let count: u64 = parts[2].parse().map_err(|_| err("bad count"))?;
            if id < NUM_RESERVED {
                if parts[1] != RESERVED_NAMES[id] {
                    return Err(err("reserved entry out of place"));
                }
                continue;
            }
            if id != NUM_RESERVED + ranked.len() {
                return Err(err("ids must be dense and ascending"));
            }
            if id >= size {
                return Err(err("id exceeds vocabulary size"));
            }
            let hex = parts[1].strip_prefix("U+").ok_or_else(|| err("character must be U+XXXX"))?;
            let c = u32::from_str_radix(hex, 16)
                .ok()
                .and_then(char::from_u32)
                .ok_or_else(|| err("invalid code point"))?;
            ranked.push((c, count));
        }
        Ok(Self::from_ranked(&ranked, size))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(texts: &[&str], size: usize) -> CharVocab {
        CharVocab::build(texts.iter().map(|t| ("xx", *t)), size).unwrap()
    }

    #[test]
    fn frequency_then_code_point_order() {
        let v = vocab(&["aab"], 8);
        assert!(v.id('a').unwrap() < v.id('b').unwrap());
        let v = vocab(&["ba"], 8);
        assert!(v.id('a').unwrap() < v.id('b').unwrap());
    }

    #[test]
    fn single_char_corpus() {
        let v = vocab(&["zzzz"], 16);
        assert_eq!(v.used(), NUM_RESERVED + 1);
        assert_eq!(v.size(), 16);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            CharVocab::build(std::iter::empty(), 10),
            Err(VocabError::EmptyCorpus)
        ));
        assert!(matches!(CharVocab::build([("x", "a")], 6), Err(VocabError::TooSmall(6))));
        let v = vocab(&["ab"], 8);
        assert!(v.decode(&[8]).is_err());
    }

    #[test]
    fn encode_decode_basics() {
        let v = vocab(&["ab"], 8);
        let ids = v.encode("ab", DEFAULT_TEXT_CAP);
        assert_eq!(ids, vec![v.id('a').unwrap(), v.id('b').unwrap()]);
        assert_eq!(v.decode(&ids).unwrap(), "ab");
        assert_eq!(v.decode(&[BLANK, PAD]).unwrap(), "");
        assert!(v.encode("aq", 10).contains(&UNK));
        let long: String = "ab".repeat(300);
        assert_eq!(v.encode(&long, DEFAULT_TEXT_CAP).len(), 512);
    }

    #[test]
    fn truncates_to_capacity() {
        let text: String = (0..200u32).map(|i| char::from_u32(0x4e00 + i).unwrap()).collect();
        let v = vocab(&[&text], 50);
        assert_eq!(v.used(), 50);
    }

    #[test]
    fn tsv_round_trip() {
        let v = vocab(&["hello wörld"], 32);
        let mut buf = Vec::new();
        v.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("0\t<pad>\t0\n"));
        let back = CharVocab::read_tsv(&buf[..], 32).unwrap();
        assert_eq!(back, v);
    }

    proptest! {
        #[test]
        fn round_trip_in_vocab(idx in proptest::collection::vec(0usize..5, 0..80)) {
            let v = vocab(&["abcde"], 16);
            let s: String = idx.iter().map(|&i| "abcde".as_bytes()[i] as char).collect();
            prop_assert_eq!(v.decode(&v.encode(&s, DEFAULT_TEXT_CAP)).unwrap(), s);
        }

        #[test]
        fn encode_never_emits_control_ids(s in "\\PC{0,40}") {
            let v = vocab(&["abc xyz"], 16);
            for id in v.encode(&s, DEFAULT_TEXT_CAP) {
                prop_assert!(id == UNK || id as usize >= NUM_RESERVED);
            }
        }

        #[test]
        fn higher_count_never_gets_higher_id(text in "[a-f]{1,60}") {
            let v = vocab(&[&text], 16);
            let ids: Vec<u32> = v.char_ids().collect();
            for w in ids.windows(2) {
                prop_assert!(v.count(w[0]) >= v.count(w[1]));
            }
        }
    }
}
