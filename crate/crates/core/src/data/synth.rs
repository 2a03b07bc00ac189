//! Seeded synthetic corpus standing in for real speech triplets.
//!
//! Generation is a pure function of [`SyntheticSpec`]. The random stream is
//! ChaCha8 (`rand_chacha`) seeded with `seed_from_u64(spec.seed)`; Gaussian
//! draws use `rand_distr::StandardNormal`. Draw order:
//!
//! 1. target-vocabulary permutation (Fisher-Yates shuffle of `0..vocab_size`);
//! 2. token prototypes, `vocab_size × d` standard normals, row-major;
//! 3. per sample, in order: source length, then per token its id and repeat
//!    count, then `T × d` noise values row-major.
//!
//! Adjacent source tokens always differ, so each token's frames form one
//! maximal label run. Frame labels are `token + 1`; label 0 is the blank.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::features::{write_features, FeatureSequence};
use super::manifest::{write_manifest, Manifest, ManifestRecord};
use super::DataError;

pub const MAX_SYNTH_VOCAB: usize = 64;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FEATURE_DIR: &str = "features";
pub const TEXT_CORPUS_FILE: &str = "text.tsv";

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_samples: usize,
    pub vocab_size: usize,
    pub len_range: (usize, usize),
    pub repeat_range: (usize, usize),
    pub noise_sigma: f64,
    pub dim: usize,
    /// Extra text-only sentence pairs in the same language, no audio.
    pub text_pairs: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_samples: 32,
            vocab_size: 24,
            len_range: (2, 4),
            repeat_range: (2, 5),
            noise_sigma: 0.1,
            dim: 16,
            text_pairs: 256,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        if self.vocab_size < 2 || self.vocab_size > MAX_SYNTH_VOCAB {
            return bad("vocab_size must be in 2..=64");
        }
        if self.len_range.0 < 1 || self.len_range.0 > self.len_range.1 {
            return bad("len_range must satisfy 1 <= min <= max");
        }
        if self.repeat_range.0 < 1 || self.repeat_range.0 > self.repeat_range.1 {
            return bad("repeat_range must satisfy 1 <= min <= max");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and >= 0");
        }
        if self.dim == 0 {
            return bad("dim must be >= 1");
        }
        Ok(())
    }
}

/// Source-side word for token `i` (consonant + vowel).
pub fn source_word(i: usize) -> String {
    let c = CONSONANTS[i % CONSONANTS.len()] as char;
    let v = VOWELS[(i / CONSONANTS.len()) % VOWELS.len()] as char;
    format!("{c}{v}")
}

/// Target-side word for slot `j` (vowel + consonant + consonant).
pub fn target_word(j: usize) -> String {
    let v = VOWELS[j % VOWELS.len()] as char;
    let c = CONSONANTS[(j / VOWELS.len()) % CONSONANTS.len()] as char;
    format!("{v}{c}t")
}

/// Substitutes each source word through `lexicon` then reverses word order.
pub fn translate(source_tokens: &[usize], lexicon: &[usize]) -> String {
    source_tokens
        .iter()
        .rev()
        .map(|&t| target_word(lexicon[t]))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub tokens: Vec<usize>,
    pub repeats: Vec<usize>,
    pub features: FeatureSequence,
    pub labels: Vec<u32>,
    pub transcript: String,
    pub translation: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    /// `lexicon[source_token]` is the target slot it maps to.
    pub lexicon: Vec<usize>,
    pub prototypes: Vec<Vec<f64>>,
    pub samples: Vec<SyntheticSample>,
    /// `(transcript, translation)` pairs drawn after all samples.
    pub text_pairs: Vec<(String, String)>,
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut lexicon: Vec<usize> = (0..spec.vocab_size).collect();
    lexicon.shuffle(&mut rng);

    let prototypes: Vec<Vec<f64>> = (0..spec.vocab_size)
        .map(|_| (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();

    let mut samples = Vec::with_capacity(spec.n_samples);
    for n in 0..spec.n_samples {
        let len = rng.random_range(spec.len_range.0..=spec.len_range.1);
        let mut tokens = Vec::with_capacity(len);
        let mut repeats = Vec::with_capacity(len);
        for _ in 0..len {
            tokens.push(next_token(
                &mut rng,
                tokens.last().copied(),
                spec.vocab_size,
            ));
            repeats.push(rng.random_range(spec.repeat_range.0..=spec.repeat_range.1));
        }

        let frames: usize = repeats.iter().sum();
        let mut values = Vec::with_capacity(frames * spec.dim);
        let mut labels = Vec::with_capacity(frames);
        for (&tok, &k) in tokens.iter().zip(&repeats) {
            for _ in 0..k {
                for &p in &prototypes[tok] {
                    let noise: f64 = rng.sample(StandardNormal);
                    values.push((p + spec.noise_sigma * noise) as f32);
                }
                labels.push(tok as u32 + 1);
            }
        }
        let features = FeatureSequence::new(frames, spec.dim, values)?;

        let transcript = tokens
            .iter()
            .map(|&t| source_word(t))
            .collect::<Vec<_>>()
            .join(" ");
        let translation = translate(&tokens, &lexicon);
        samples.push(SyntheticSample {
            id: format!("syn-{n:04}"),
            tokens,
            repeats,
            features,
            labels,
            transcript,
            translation,
        });
    }

    let mut text_pairs = Vec::with_capacity(spec.text_pairs);
    for _ in 0..spec.text_pairs {
        let len = rng.random_range(spec.len_range.0..=spec.len_range.1);
        let mut tokens = Vec::with_capacity(len);
        for _ in 0..len {
            tokens.push(next_token(
                &mut rng,
                tokens.last().copied(),
                spec.vocab_size,
            ));
        }
        let transcript = tokens
            .iter()
            .map(|&t| source_word(t))
            .collect::<Vec<_>>()
            .join(" ");
        text_pairs.push((transcript, translate(&tokens, &lexicon)));
    }

    Ok(SyntheticCorpus {
        lexicon,
        prototypes,
        samples,
        text_pairs,
    })
}

fn next_token(rng: &mut ChaCha8Rng, prev: Option<usize>, vocab_size: usize) -> usize {
    match prev {
        None => rng.random_range(0..vocab_size),
        Some(prev) => {
            // skip over the previous token so runs stay maximal
            let t = rng.random_range(0..vocab_size - 1);
            if t >= prev {
                t + 1
            } else {
                t
            }
        }
    }
}

/// One `transcript<TAB>translation` pair per line.
pub fn write_text_pairs(
    pairs: &[(String, String)],
    path: impl AsRef<Path>,
) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut text = String::new();
    for (a, b) in pairs {
        text.push_str(a);
        text.push('\t');
        text.push_str(b);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| DataError::io(path, e))
}

pub fn read_text_pairs(path: impl AsRef<Path>) -> Result<Vec<(String, String)>, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| DataError::ManifestLine {
                line: i + 1,
                message: "expected transcript<TAB>translation".into(),
            })?;
        out.push((a.to_string(), b.to_string()));
    }
    Ok(out)
}

/// Writes `manifest.jsonl`, `features/<id>.stfz` and `text.tsv` under `out_dir`.
pub fn synth_dataset(
    spec: &SyntheticSpec,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest, DataError> {
    let out_dir = out_dir.as_ref();
    let corpus = generate(spec)?;
    let feat_dir = out_dir.join(FEATURE_DIR);
    fs::create_dir_all(&feat_dir).map_err(|e| DataError::io(&feat_dir, e))?;

    let mut records = Vec::with_capacity(corpus.samples.len());
    for s in &corpus.samples {
        let rel = format!("{FEATURE_DIR}/{}.stfz", s.id);
        write_features(&s.features, out_dir.join(&rel))?;
        records.push(ManifestRecord {
            id: s.id.clone(),
            features: rel,
            transcript: s.transcript.clone(),
            translation: Some(s.translation.clone()),
            labels: Some(s.labels.clone()),
        });
    }
    let manifest = Manifest::new(out_dir, records)?;
    write_manifest(&manifest, out_dir.join(MANIFEST_FILE))?;
    write_text_pairs(&corpus.text_pairs, out_dir.join(TEXT_CORPUS_FILE))?;
    Ok(manifest)
}
