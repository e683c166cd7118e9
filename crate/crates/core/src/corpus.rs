//! Records for the three data kinds, their manifests and feature files,
//! and the synthetic rendered-character world used for desk experiments.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Lines, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use thiserror::Error;

use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"MSLAMFT1";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {msg}")]
    Manifest { path: String, line: usize, msg: String },
    #[error("feature file {path}: {msg}")]
    Feature { path: String, msg: String },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Unlabeled speech: `[frames, frame_dim]` features.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechUtterance {
    pub id: String,
    pub lang: String,
    pub frames: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextSentence {
    pub id: String,
    pub lang: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedExample {
    pub id: String,
    pub lang: String,
    pub frames: Tensor,
    pub transcript: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifestKind {
    Speech,
    Text,
    Paired,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    Speech(SpeechUtterance),
    Text(TextSentence),
    Paired(PairedExample),
}

impl Record {
    pub fn lang(&self) -> &str {
        match self {
            Record::Speech(r) => &r.lang,
            Record::Text(r) => &r.lang,
            Record::Paired(r) => &r.lang,
        }
    }
}

pub fn write_features(path: &Path, frames: &Tensor) -> Result<(), CorpusError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    let mut buf = Vec::with_capacity(16 + frames.numel() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(frames.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(frames.cols() as u32).to_le_bytes());
    for &v in frames.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_features(path: &Path) -> Result<Tensor, CorpusError> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(io_err(path))?;
    let bad = |msg: &str| CorpusError::Feature {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    if buf.len() < 16 || &buf[..8] != FEATURE_MAGIC {
        return Err(bad("missing magic"));
    }
    let frames = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
    if frames == 0 || dim == 0 {
        return Err(bad("empty feature matrix"));
    }
    if buf.len() != 16 + frames * dim * 4 {
        return Err(bad("payload length does not match header"));
    }
    let data = buf[16..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Tensor::new(vec![frames, dim], data).map_err(|e| bad(&e.to_string()))
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        out.push(match it.next()? {
            '\\' => '\\',
            't' => '\t',
            'n' => '\n',
            'r' => '\r',
            _ => return None,
        });
    }
    Some(out)
}

/// Lazily parses a manifest, yielding records in file order. Feature
/// paths are resolved relative to the manifest's directory.
pub struct ManifestReader {
    lines: Lines<BufReader<File>>,
    path: PathBuf,
    base: PathBuf,
    kind: ManifestKind,
    line: usize,
}

pub fn load_manifest(path: &Path, kind: ManifestKind) -> Result<ManifestReader, CorpusError> {
    let f = File::open(path).map_err(io_err(path))?;
    Ok(ManifestReader {
        lines: BufReader::new(f).lines(),
        path: path.to_path_buf(),
        base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        kind,
        line: 0,
    })
}

impl ManifestReader {
    fn parse(&self, text: &str) -> Result<Record, CorpusError> {
        let err = |msg: String| CorpusError::Manifest {
            path: self.path.display().to_string(),
            line: self.line,
            msg,
        };
        let fields: Vec<&str> = text.split('\t').collect();
        let want = match self.kind {
            ManifestKind::Speech | ManifestKind::Text => 3,
            ManifestKind::Paired => 4,
        };
        if fields.len() != want {
            return Err(err(format!("expected {want} fields, found {}", fields.len())));
        }
        let id = fields[0].to_string();
        let lang = fields[1].to_string();
        if id.is_empty() || lang.is_empty() {
            return Err(err("empty id or language".into()));
        }
        let load = |rel: &str| -> Result<Tensor, CorpusError> {
            let p = self.base.join(rel);
            if !p.exists() {
                return Err(err(format!("missing feature file {}", p.display())));
            }
            read_features(&p)
        };
        let text_field = |raw: &str| -> Result<String, CorpusError> {
            let t = unescape(raw).ok_or_else(|| err("bad escape sequence".into()))?;
            if t.trim().is_empty() {
                return Err(err("empty text".into()));
            }
            Ok(t)
        };
        Ok(match self.kind {
            ManifestKind::Speech => Record::Speech(SpeechUtterance {
                id,
                lang,
                frames: load(fields[2])?,
            }),
            ManifestKind::Text => Record::Text(TextSentence {
                id,
                lang,
                text: text_field(fields[2])?,
            }),
            ManifestKind::Paired => Record::Paired(PairedExample {
                id,
                lang,
                frames: load(fields[2])?,
                transcript: text_field(fields[3])?,
            }),
        })
    }
}

impl Iterator for ManifestReader {
    type Item = Result<Record, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(io_err(&self.path)(e))),
            };
            self.line += 1;
            if line.is_empty() {
                continue;
            }
            return Some(self.parse(&line));
        }
    }
}

/// One synthetic language: which script it writes in and which streams
/// it contributes to.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthLanguage {
    pub tag: String,
    pub speech: bool,
    pub text: bool,
    pub paired: bool,
}

impl SynthLanguage {
    pub fn new(tag: &str, speech: bool, text: bool, paired: bool) -> Self {
        Self {
            tag: tag.to_string(),
            speech,
            text,
            paired,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub languages: Vec<SynthLanguage>,
    pub chars_per_language: usize,
    pub frames_per_char: usize,
    pub frame_dim: usize,
    pub noise_std: f64,
    /// language → script name; unmapped languages get a private script.
    pub script_map: BTreeMap<String, String>,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            languages: vec![
                SynthLanguage::new("aa", true, true, true),
                SynthLanguage::new("bb", true, true, true),
                SynthLanguage::new("cc", true, true, false),
            ],
            chars_per_language: 16,
            frames_per_char: 4,
            frame_dim: 16,
            noise_std: 0.1,
            script_map: BTreeMap::new(),
            min_len: 4,
            max_len: 8,
        }
    }
}

const SCRIPT_BASES: [u32; 6] = [0x61, 0x3B1, 0x430, 0x5D0, 0x10D0, 0x0E01];

impl SynthSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::Spec(m.to_string()));
        if self.languages.is_empty() {
            return bad("no languages");
        }
        if self.frames_per_char < 1 {
            return bad("frames_per_char must be ≥ 1");
        }
        if self.frame_dim < 1 {
            return bad("frame_dim must be ≥ 1");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be ≥ 0");
        }
        if self.chars_per_language < 2 || self.chars_per_language > 24 {
            return bad("chars_per_language must lie in [2, 24]");
        }
        if self.min_len < 1 || self.max_len < self.min_len {
            return bad("need 1 ≤ min_len ≤ max_len");
        }
        if self.scripts().len() > SCRIPT_BASES.len() {
            return bad("too many distinct scripts");
        }
        Ok(())
    }

    pub fn script_of(&self, lang: &str) -> String {
        self.script_map
            .get(lang)
            .cloned()
            .unwrap_or_else(|| format!("script-{lang}"))
    }

    /// Distinct scripts in order of first use.
    pub fn scripts(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for l in &self.languages {
            let s = self.script_of(&l.tag);
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out
    }

    pub fn alphabet(&self, lang: &str) -> Vec<char> {
        let scripts = self.scripts();
        let k = scripts.iter().position(|s| *s == self.script_of(lang)).unwrap_or(0);
        (0..self.chars_per_language as u32)
            .map(|i| char::from_u32(SCRIPT_BASES[k] + i).unwrap())
            .collect()
    }
}

/// Frozen per-character prototypes plus per-language character
/// frequencies; everything derived from `(spec, seed)`.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub spec: SynthSpec,
    prototypes: BTreeMap<char, Vec<f64>>,
    alphabets: BTreeMap<String, Vec<char>>,
    weights: BTreeMap<String, WeightedIndex<f64>>,
}

impl SynthWorld {
    pub fn new(spec: SynthSpec, seed: u64) -> Result<Self, CorpusError> {
        spec.validate()?;
        let mut proto_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5052_4f54_4f00_0000);
        let mut prototypes = BTreeMap::new();
        let mut alphabets = BTreeMap::new();
        let mut weights = BTreeMap::new();
        for script in spec.scripts() {
            let lang = spec
                .languages
                .iter()
                .find(|l| spec.script_of(&l.tag) == script)
                .unwrap();
            for c in spec.alphabet(&lang.tag) {
                let v: Vec<f64> = (0..spec.frame_dim)
                    .map(|_| StandardNormal.sample(&mut proto_rng))
                    .collect();
                prototypes.insert(c, v);
            }
        }
        for (i, l) in spec.languages.iter().enumerate() {
            let alphabet = spec.alphabet(&l.tag);
            let mut ranks: Vec<usize> = (0..alphabet.len()).collect();
            let mut lrng = ChaCha8Rng::seed_from_u64(seed ^ (0x4c41_4e47 + i as u64));
            ranks.shuffle(&mut lrng);
            let w: Vec<f64> = ranks.iter().map(|&r| 1.0 / ((r + 1) as f64).sqrt()).collect();
            weights.insert(l.tag.clone(), WeightedIndex::new(w).expect("positive weights"));
            alphabets.insert(l.tag.clone(), alphabet);
        }
        Ok(Self {
            spec,
            prototypes,
            alphabets,
            weights,
        })
    }

    pub fn prototype(&self, c: char) -> Option<&[f64]> {
        self.prototypes.get(&c).map(Vec::as_slice)
    }

    pub fn alphabet(&self, lang: &str) -> &[char] {
        self.alphabets.get(lang).map_or(&[], Vec::as_slice)
    }

    /// A sentence in `lang` with no two equal adjacent characters.
    pub fn sentence<R: Rng>(&self, lang: &str, rng: &mut R) -> String {
        let alphabet = &self.alphabets[lang];
        let dist = &self.weights[lang];
        let len = rng.gen_range(self.spec.min_len..=self.spec.max_len);
        let mut out: Vec<char> = Vec::with_capacity(len);
        while out.len() < len {
            let c = alphabet[dist.sample(rng)];
            if out.last() != Some(&c) {
                out.push(c);
            }
        }
        out.into_iter().collect()
    }

    /// `frames_per_char` frames per character: prototype plus Gaussian
    /// noise of `noise_std`.
    pub fn render<R: Rng>(&self, text: &str, rng: &mut R) -> Result<Tensor, CorpusError> {
        let fpc = self.spec.frames_per_char;
        let dim = self.spec.frame_dim;
        let n = text.chars().count();
        if n == 0 {
            return Err(CorpusError::Spec("cannot render empty text".into()));
        }
        let mut data = Vec::with_capacity(n * fpc * dim);
        for c in text.chars() {
            let p = self
                .prototype(c)
                .ok_or_else(|| CorpusError::Spec(format!("no prototype for {c:?}")))?;
            for _ in 0..fpc {
                for &v in p {
                    let noise: f64 = if self.spec.noise_std > 0.0 {
                        self.spec.noise_std * { let z: f64 = StandardNormal.sample(rng); z }
                    } else {
                        0.0
                    };
                    data.push(v + noise);
                }
            }
        }
        Ok(Tensor::new(vec![n * fpc, dim], data).expect("rendered shape"))
    }
}

/// An in-memory synthetic corpus.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub world: SynthWorld,
    pub speech: Vec<SpeechUtterance>,
    pub text: Vec<TextSentence>,
    pub paired: Vec<PairedExample>,
}

/// Draws `sentences` records per language for every stream the language
/// participates in. Deterministic in `(spec, seed)`.
pub fn gen_synth(spec: &SynthSpec, sentences: usize, seed: u64) -> Result<SynthCorpus, CorpusError> {
    let world = SynthWorld::new(spec.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = SynthCorpus {
        world,
        speech: Vec::new(),
        text: Vec::new(),
        paired: Vec::new(),
    };
    for l in &spec.languages {
        for i in 0..sentences {
            if l.speech {
                let s = corpus.world.sentence(&l.tag, &mut rng);
                corpus.speech.push(SpeechUtterance {
                    id: format!("{}-s{i:05}", l.tag),
                    lang: l.tag.clone(),
                    frames: corpus.world.render(&s, &mut rng)?,
                });
            }
            if l.text {
                corpus.text.push(TextSentence {
                    id: format!("{}-t{i:05}", l.tag),
                    lang: l.tag.clone(),
                    text: corpus.world.sentence(&l.tag, &mut rng),
                });
            }
            if l.paired {
                let s = corpus.world.sentence(&l.tag, &mut rng);
                corpus.paired.push(PairedExample {
                    id: format!("{}-p{i:05}", l.tag),
                    lang: l.tag.clone(),
                    frames: corpus.world.render(&s, &mut rng)?,
                    transcript: s,
                });
            }
        }
    }
    Ok(corpus)
}

/// Paths written by [`SynthCorpus::write`].
#[derive(Clone, Debug)]
pub struct Manifests {
    pub speech: PathBuf,
    pub text: PathBuf,
    pub paired: PathBuf,
}

impl SynthCorpus {
    /// Writes `speech.tsv`, `text.tsv`, `paired.tsv` and a `feats/`
    /// directory of feature files under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Manifests, CorpusError> {
        let feats = dir.join("feats");
        fs::create_dir_all(&feats).map_err(io_err(&feats))?;
        let m = Manifests {
            speech: dir.join("speech.tsv"),
            text: dir.join("text.tsv"),
            paired: dir.join("paired.tsv"),
        };
        let open = |p: &Path| File::create(p).map(BufWriter::new).map_err(io_err(p));
        let mut w = open(&m.speech)?;
        for u in &self.speech {
            let rel = format!("feats/{}.feat", u.id);
            write_features(&dir.join(&rel), &u.frames)?;
            writeln!(w, "{}\t{}\t{rel}", u.id, u.lang).map_err(io_err(&m.speech))?;
        }
        w.flush().map_err(io_err(&m.speech))?;
        let mut w = open(&m.text)?;
        for t in &self.text {
            writeln!(w, "{}\t{}\t{}", t.id, t.lang, escape(&t.text)).map_err(io_err(&m.text))?;
        }
        w.flush().map_err(io_err(&m.text))?;
        let mut w = open(&m.paired)?;
        for p in &self.paired {
            let rel = format!("feats/{}.feat", p.id);
            write_features(&dir.join(&rel), &p.frames)?;
            writeln!(w, "{}\t{}\t{rel}\t{}", p.id, p.lang, escape(&p.transcript)).map_err(io_err(&m.paired))?;
        }
        w.flush().map_err(io_err(&m.paired))?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_one_lang(noise: f64) -> SynthSpec {
        SynthSpec {
            languages: vec![SynthLanguage::new("xx", true, true, true)],
            noise_std: noise,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn noiseless_char_renders_identical_frames() {
        let w = SynthWorld::new(spec_one_lang(0.0), 3).unwrap();
        let c = w.alphabet("xx")[0];
        let f = w.render(&c.to_string(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(f.shape(), &[4, 16]);
        for r in 1..4 {
            assert_eq!(f.row(r), f.row(0));
        }
    }

    #[test]
    fn frame_count_is_chars_times_fpc() {
        let c = gen_synth(&SynthSpec::default(), 5, 1).unwrap();
        for p in &c.paired {
            assert_eq!(p.frames.rows(), 4 * p.transcript.chars().count());
        }
    }

    #[test]
    fn noiseless_rendering_is_injective() {
        let w = SynthWorld::new(spec_one_lang(0.0), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen: Vec<(String, Tensor)> = Vec::new();
        for _ in 0..60 {
            let s = w.sentence("xx", &mut rng);
            let f = w.render(&s, &mut rng).unwrap();
            for (s2, f2) in &seen {
                assert_eq!(*s2 == s, *f2 == f);
            }
            seen.push((s, f));
        }
    }

    #[test]
    fn disjoint_scripts_have_disjoint_prototypes() {
        let mut spec = SynthSpec::default();
        spec.script_map.insert("aa".into(), "latin".into());
        spec.script_map.insert("cc".into(), "latin".into());
        let w = SynthWorld::new(spec, 2).unwrap();
        let a: Vec<char> = w.alphabet("aa").to_vec();
        let b: Vec<char> = w.alphabet("bb").to_vec();
        assert!(a.iter().all(|c| !b.contains(c)));
        assert_eq!(w.alphabet("cc"), &a[..]);
        for (ca, cb) in a.iter().zip(&b) {
            assert_ne!(w.prototype(*ca), w.prototype(*cb));
        }
    }

    #[test]
    fn sentences_have_no_adjacent_repeats() {
        let w = SynthWorld::new(SynthSpec::default(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let s: Vec<char> = w.sentence("bb", &mut rng).chars().collect();
            assert!(s.windows(2).all(|p| p[0] != p[1]));
        }
    }

    #[test]
    fn same_seed_same_files() {
        let spec = SynthSpec::default();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        gen_synth(&spec, 3, 11).unwrap().write(d1.path()).unwrap();
        gen_synth(&spec, 3, 11).unwrap().write(d2.path()).unwrap();
        for entry in fs::read_dir(d1.path().join("feats")).unwrap() {
            let p = entry.unwrap().path();
            let q = d2.path().join("feats").join(p.file_name().unwrap());
            assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
        }
    }

    #[test]
    fn manifests_load_in_order() {
        let d = tempfile::tempdir().unwrap();
        let c = gen_synth(&SynthSpec::default(), 1, 5).unwrap();
        let m = c.write(d.path()).unwrap();
        let recs: Vec<Record> = load_manifest(&m.paired, ManifestKind::Paired)
            .unwrap()
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(recs.len(), 2);
        let Record::Paired(p) = &recs[0] else { panic!() };
        assert_eq!(p.transcript, c.paired[0].transcript);
        let texts: Vec<Record> = load_manifest(&m.text, ManifestKind::Text)
            .unwrap()
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(texts.len(), 3);
    }

    #[test]
    fn manifest_errors() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("m.tsv");
        fs::write(&p, "").unwrap();
        assert_eq!(load_manifest(&p, ManifestKind::Text).unwrap().count(), 0);
        fs::write(&p, "a\txx\thello\nb\txx\n").unwrap();
        let recs: Vec<_> = load_manifest(&p, ManifestKind::Text).unwrap().collect();
        assert!(recs[0].is_ok());
        let msg = recs[1].as_ref().unwrap_err().to_string();
        assert!(msg.contains(":2:"), "{msg}");
        fs::write(&p, "a\txx\tmissing.feat\n").unwrap();
        let r = load_manifest(&p, ManifestKind::Speech).unwrap().next().unwrap();
        assert!(r.unwrap_err().to_string().contains("missing feature file"));
    }

    #[test]
    fn escaping_round_trips() {
        let s = "a\tb\\n\nc";
        assert_eq!(unescape(&escape(s)).unwrap(), s);
    }
}
