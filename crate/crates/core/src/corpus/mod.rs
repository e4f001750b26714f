//! Deterministic synthetic speech-translation benchmark.
//!
//! A seeded bigram grammar produces source sentences. Each source character
//! has a fixed prototype frame; an utterance is the prototypes of its
//! characters (spaces included) repeated `frames_per_char` times plus
//! Gaussian noise. The target is a word-by-word dictionary translation with
//! every adjacent pair at even positions swapped. Language-model text comes
//! from the same grammar (in-domain) or a shifted one (general).

mod frames;
mod manifest;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

pub use frames::{decode_frames, encode_frames, read_frames, write_frames, FRAME_FORMAT_VERSION};
pub use manifest::{load_manifest, write_manifest, ManifestEntry, PipelineManifest};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed::{self, Rng};

/// Nominal frame rate of the synthetic features.
pub const FRAMES_PER_SECOND: f64 = 100.0;

const SOURCE_ALPHABET: &str = "abcdefghij";
const TARGET_ALPHABET: &str = "klmnopqrstuvwxyz";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Gold,
    Pseudo,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Gold => "gold",
            Provenance::Pseudo => "pseudo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gold" => Some(Provenance::Gold),
            "pseudo" => Some(Provenance::Pseudo),
            _ => None,
        }
    }
}

/// Feature frames of one utterance, `[T×D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub frames: Arc<Tensor<f32>>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn duration_secs(&self) -> f64 {
        self.num_frames() as f64 / FRAMES_PER_SECOND
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelExample {
    pub utt: Utterance,
    pub target: Option<String>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub labeled_train: usize,
    pub unlabeled_pool: usize,
    pub dev: usize,
    pub test: usize,
    pub lm_in_domain: usize,
    pub lm_general: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    /// Source word → target word, a bijection.
    pub dictionary: BTreeMap<String, String>,
    pub frames_per_char: usize,
    pub noise_sigma: f64,
    pub dim: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Fraction of general LM text drawn from the in-domain grammar.
    pub general_overlap: f64,
    pub split_sizes: SplitSizes,
}

impl SynthSpec {
    /// Builds a spec whose dictionary is drawn from `seed`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        seed: u64,
        vocab_size: usize,
        frames_per_char: usize,
        noise_sigma: f64,
        dim: usize,
        words: (usize, usize),
        split_sizes: SplitSizes,
    ) -> Result<Self> {
        let dictionary = random_dictionary(seed, vocab_size)?;
        let spec = Self {
            seed,
            source_vocab_size: vocab_size,
            target_vocab_size: vocab_size,
            dictionary,
            frames_per_char,
            noise_sigma,
            dim,
            min_words: words.0,
            max_words: words.1,
            general_overlap: 0.1,
            split_sizes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.source_vocab_size != self.target_vocab_size {
            return bad("dictionary must be a bijection: vocab sizes differ".into());
        }
        if self.dictionary.len() != self.source_vocab_size {
            return bad(format!(
                "dictionary has {} entries, expected {}",
                self.dictionary.len(),
                self.source_vocab_size
            ));
        }
        let targets: HashSet<&String> = self.dictionary.values().collect();
        if targets.len() != self.dictionary.len() {
            return bad("dictionary maps two source words to one target".into());
        }
        if self.frames_per_char == 0 || self.dim == 0 {
            return bad("frames_per_char and dim must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma {} < 0", self.noise_sigma));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad(format!("bad sentence length range {}..={}", self.min_words, self.max_words));
        }
        if !(0.0..=1.0).contains(&self.general_overlap) {
            return bad("general_overlap must lie in [0,1]".into());
        }
        Ok(())
    }

    fn source_words(&self) -> Vec<&str> {
        self.dictionary.keys().map(String::as_str).collect()
    }
}

fn random_word(rng: &mut Rng, alphabet: &[char], min: usize, max: usize) -> String {
    let n = rng.random_range(min..=max);
    (0..n).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
}

fn random_dictionary(seed: u64, size: usize) -> Result<BTreeMap<String, String>> {
    let src: Vec<char> = SOURCE_ALPHABET.chars().collect();
    let tgt: Vec<char> = TARGET_ALPHABET.chars().collect();
    let mut rng = seed::stream(seed, "lexicon");
    let mut source = BTreeSet::new();
    let mut target = BTreeSet::new();
    let mut tries = 0;
    while source.len() < size || target.len() < size {
        tries += 1;
        if tries > 100_000 {
            return Err(Error::InvalidArgument(format!("cannot draw {size} distinct words")));
        }
        if source.len() < size {
            source.insert(random_word(&mut rng, &src, 2, 4));
        }
        if target.len() < size {
            target.insert(random_word(&mut rng, &tgt, 2, 5));
        }
    }
    let mut target: Vec<String> = target.into_iter().collect();
    target.shuffle(&mut rng);
    Ok(source.into_iter().zip(target).collect())
}

/// Sparse bigram grammar over word indices.
#[derive(Clone, Debug)]
pub struct BigramGrammar {
    successors: Vec<Vec<(usize, f64)>>,
    vocab: usize,
}

const SUCCESSOR_WEIGHTS: [f64; 3] = [0.5, 0.3, 0.15];
const UNIFORM_MASS: f64 = 0.05;

impl BigramGrammar {
    fn random(vocab: usize, rng: &mut Rng) -> Self {
        let successors = (0..vocab)
            .map(|_| {
                let mut idx: Vec<usize> = (0..vocab).collect();
                idx.shuffle(rng);
                idx.into_iter().zip(SUCCESSOR_WEIGHTS).collect()
            })
            .collect();
        Self { successors, vocab }
    }

    /// Same vocabulary with every preferred successor rotated by `shift`.
    fn shifted(&self, shift: usize) -> Self {
        let successors = self
            .successors
            .iter()
            .map(|s| s.iter().map(|&(w, p)| ((w + shift) % self.vocab, p)).collect())
            .collect();
        Self {
            successors,
            vocab: self.vocab,
        }
    }

    fn sample(&self, len: usize, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        let mut w = rng.random_range(0..self.vocab);
        out.push(w);
        while out.len() < len {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut next = None;
            for &(s, p) in &self.successors[w] {
                acc += p;
                if u < acc {
                    next = Some(s);
                    break;
                }
            }
            w = next.unwrap_or_else(|| rng.random_range(0..self.vocab));
            out.push(w);
        }
        out
    }

    /// Probability of word `b` following `a`.
    pub fn transition(&self, a: usize, b: usize) -> f64 {
        let listed: f64 = self.successors[a].iter().filter(|(s, _)| *s == b).map(|(_, p)| p).sum();
        listed + UNIFORM_MASS / self.vocab as f64
    }
}

/// Swaps words at positions (0,1), (2,3), …
pub fn reorder(words: &mut [String]) {
    for pair in words.chunks_mut(2) {
        if pair.len() == 2 {
            pair.swap(0, 1);
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthUtterance {
    pub id: String,
    pub source: String,
    pub target: String,
    pub frames: Tensor<f32>,
}

/// Fully materialized benchmark.
#[derive(Clone, Debug)]
pub struct SynthBenchmark {
    pub spec: SynthSpec,
    pub prototypes: BTreeMap<char, Vec<f32>>,
    pub grammar: BigramGrammar,
    pub general_grammar: BigramGrammar,
    pub labeled_train: Vec<SynthUtterance>,
    pub unlabeled_pool: Vec<SynthUtterance>,
    pub dev: Vec<SynthUtterance>,
    pub test: Vec<SynthUtterance>,
    pub lm_in_domain: Vec<String>,
    pub lm_general: Vec<String>,
}

/// Paths written by [`generate`].
#[derive(Clone, Debug)]
pub struct GeneratedFiles {
    pub train: PathBuf,
    pub unlabeled: PathBuf,
    pub unlabeled_gold: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    pub lm_in_domain: PathBuf,
    pub lm_general: PathBuf,
    pub lexicon: PathBuf,
}

impl GeneratedFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train: dir.join("train.tsv"),
            unlabeled: dir.join("unlabeled.tsv"),
            unlabeled_gold: dir.join("unlabeled_gold.tsv"),
            dev: dir.join("dev.tsv"),
            test: dir.join("test.tsv"),
            lm_in_domain: dir.join("lm_in_domain.txt"),
            lm_general: dir.join("lm_general.txt"),
            lexicon: dir.join("lexicon.tsv"),
        }
    }

    pub fn all(&self) -> Vec<PathBuf> {
        vec![
            self.train.clone(),
            self.unlabeled.clone(),
            self.unlabeled_gold.clone(),
            self.dev.clone(),
            self.test.clone(),
            self.lm_in_domain.clone(),
            self.lm_general.clone(),
            self.lexicon.clone(),
        ]
    }
}

impl SynthBenchmark {
    pub fn build(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let words = spec.source_words();
        let mut chars: BTreeSet<char> = words.iter().flat_map(|w| w.chars()).collect();
        chars.insert(' ');
        let mut prng = seed::stream(spec.seed, "prototypes");
        let unit = Normal::new(0.0f64, 1.0).unwrap();
        let prototypes = chars
            .into_iter()
            .map(|c| (c, (0..spec.dim).map(|_| unit.sample(&mut prng) as f32).collect()))
            .collect();

        let grammar = BigramGrammar::random(words.len(), &mut seed::stream(spec.seed, "grammar"));
        let general_grammar = grammar.shifted(1 + words.len() / 3);

        let mut bench = Self {
            spec: spec.clone(),
            prototypes,
            grammar,
            general_grammar,
            labeled_train: Vec::new(),
            unlabeled_pool: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
            lm_in_domain: Vec::new(),
            lm_general: Vec::new(),
        };
        let sizes = &spec.split_sizes;
        bench.labeled_train = bench.utterances("train", sizes.labeled_train);
        bench.unlabeled_pool = bench.utterances("unlab", sizes.unlabeled_pool);
        bench.dev = bench.utterances("dev", sizes.dev);
        bench.test = bench.utterances("test", sizes.test);

        let mut rng = seed::stream(spec.seed, "lm_in_domain");
        bench.lm_in_domain = (0..sizes.lm_in_domain)
            .map(|_| {
                let s = bench.sample_source(&bench.grammar, &mut rng);
                bench.translate(&s)
            })
            .collect();
        let mut rng = seed::stream(spec.seed, "lm_general");
        bench.lm_general = (0..sizes.lm_general)
            .map(|_| {
                let g = if rng.random::<f64>() < spec.general_overlap {
                    &bench.grammar
                } else {
                    &bench.general_grammar
                };
                let s = bench.sample_source(g, &mut rng);
                bench.translate(&s)
            })
            .collect();
        Ok(bench)
    }

    fn sample_source(&self, grammar: &BigramGrammar, rng: &mut Rng) -> String {
        let words = self.spec.source_words();
        let len = rng.random_range(self.spec.min_words..=self.spec.max_words);
        grammar
            .sample(len, rng)
            .into_iter()
            .map(|i| words[i])
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Sentences drawn from the in-domain (`true`) or shifted grammar, in the
    /// target language, from a caller-named substream.
    pub fn sample_target_sentences(&self, in_domain: bool, n: usize, stream: &str) -> Vec<String> {
        let mut rng = seed::stream(self.spec.seed, stream);
        let g = if in_domain { &self.grammar } else { &self.general_grammar };
        (0..n).map(|_| self.translate(&self.sample_source(g, &mut rng))).collect()
    }

    /// Dictionary translation followed by the pairwise swap.
    pub fn translate(&self, source: &str) -> String {
        let mut words: Vec<String> = source
            .split_whitespace()
            .map(|w| self.spec.dictionary.get(w).cloned().unwrap_or_else(|| "<unk>".into()))
            .collect();
        reorder(&mut words);
        words.join(" ")
    }

    /// Clean prototype frames for `source` (no noise).
    pub fn clean_frames(&self, source: &str) -> Tensor<f32> {
        let fpc = self.spec.frames_per_char;
        let mut data = Vec::with_capacity(source.chars().count() * fpc * self.spec.dim);
        for c in source.chars() {
            let p = &self.prototypes[&c];
            for _ in 0..fpc {
                data.extend_from_slice(p);
            }
        }
        Tensor::from_rows(source.chars().count() * fpc, self.spec.dim, data)
    }

    fn utterances(&self, prefix: &str, n: usize) -> Vec<SynthUtterance> {
        let mut text_rng = seed::stream(self.spec.seed, &format!("split:{prefix}"));
        let mut noise_rng = seed::stream(self.spec.seed, &format!("noise:{prefix}"));
        let noise = Normal::new(0.0f64, self.spec.noise_sigma.max(0.0)).unwrap();
        (0..n)
            .map(|i| {
                let source = self.sample_source(&self.grammar, &mut text_rng);
                let mut frames = self.clean_frames(&source);
                if self.spec.noise_sigma > 0.0 {
                    for v in frames.data_mut() {
                        *v += noise.sample(&mut noise_rng) as f32;
                    }
                }
                SynthUtterance {
                    id: format!("{prefix}-{:06}", i + 1),
                    target: self.translate(&source),
                    source,
                    frames,
                }
            })
            .collect()
    }

    /// Reference system that knows the generator: nearest prototype per
    /// character slot, dictionary lookup, reordering.
    pub fn oracle_translate(&self, frames: &Tensor<f32>) -> String {
        let fpc = self.spec.frames_per_char;
        let d = frames.cols();
        let inverse: HashMap<&str, ()> = self.spec.dictionary.keys().map(|k| (k.as_str(), ())).collect();
        let mut text = String::new();
        for slot in 0..frames.rows() / fpc {
            let mut mean = vec![0.0f64; d];
            for r in 0..fpc {
                for (m, v) in mean.iter_mut().zip(frames.row(slot * fpc + r)) {
                    *m += *v as f64 / fpc as f64;
                }
            }
            let best = self
                .prototypes
                .iter()
                .map(|(c, p)| {
                    let dist: f64 = p.iter().zip(&mean).map(|(a, b)| (*a as f64 - b).powi(2)).sum();
                    (dist, *c)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, c)| c)
                .unwrap_or(' ');
            text.push(best);
        }
        let source: Vec<&str> = text.split_whitespace().filter(|w| inverse.contains_key(w)).collect();
        self.translate(&source.join(" "))
    }

    fn write_split(&self, dir: &Path, name: &str, utts: &[SynthUtterance], with_target: bool) -> Result<PipelineManifest> {
        let frame_dir = dir.join("frames");
        let mut m = PipelineManifest::new(name, dir);
        for u in utts {
            let rel = PathBuf::from("frames").join(format!("{}.frm", u.id));
            write_frames(&frame_dir.join(format!("{}.frm", u.id)), &u.frames)?;
            m.entries.push(ManifestEntry {
                id: u.id.clone(),
                frames_path: rel,
                target: with_target.then(|| u.target.clone()),
                provenance: None,
            });
        }
        write_manifest(&m, &dir.join(format!("{name}.tsv")))?;
        Ok(m)
    }

    /// Writes manifests, frame files and LM text under `dir`.
    pub fn write(&self, dir: &Path) -> Result<GeneratedFiles> {
        let frame_dir = dir.join("frames");
        std::fs::create_dir_all(&frame_dir).map_err(|e| Error::io(&frame_dir, e))?;
        self.write_split(dir, "train", &self.labeled_train, true)?;
        self.write_split(dir, "unlabeled", &self.unlabeled_pool, false)?;
        self.write_split(dir, "dev", &self.dev, true)?;
        self.write_split(dir, "test", &self.test, true)?;
        let files = GeneratedFiles::in_dir(dir);
        let gold: String = self
            .unlabeled_pool
            .iter()
            .map(|u| format!("{}\t{}\n", u.id, u.target))
            .collect();
        write_text(&files.unlabeled_gold, &gold)?;
        write_text(&files.lm_in_domain, &lines(&self.lm_in_domain))?;
        write_text(&files.lm_general, &lines(&self.lm_general))?;
        let lex: String = self
            .spec
            .dictionary
            .iter()
            .map(|(s, t)| format!("{s}\t{t}\n"))
            .collect();
        write_text(&files.lexicon, &lex)?;
        Ok(files)
    }
}

fn lines(v: &[String]) -> String {
    v.iter().map(|s| format!("{s}\n")).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generates every split of `spec` into `dir`.
pub fn generate(spec: &SynthSpec, dir: &Path) -> Result<GeneratedFiles> {
    SynthBenchmark::build(spec)?.write(dir)
}

/// Reads one sentence per line, skipping empty lines.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

/// Loads every entry's frames. Entries carry their manifest provenance, or
/// `Gold` when the manifest has none.
pub fn load_examples(m: &PipelineManifest) -> Result<Vec<ParallelExample>> {
    m.entries
        .iter()
        .map(|e| {
            let frames = read_frames(&m.resolve(e))?;
            Ok(ParallelExample {
                utt: Utterance {
                    id: e.id.clone(),
                    frames: Arc::new(frames),
                },
                target: e.target.clone(),
                provenance: e.provenance.unwrap_or(Provenance::Gold),
            })
        })
        .collect()
}

/// `id<TAB>text` table, e.g. hidden gold targets of the unlabeled pool.
pub fn read_id_text(path: &Path) -> Result<BTreeMap<String, String>> {
    read_lines(path)?
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            l.split_once('\t')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::parse(path, i + 1, "expected id<TAB>text"))
        })
        .collect()
}
