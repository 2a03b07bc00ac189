//! Prompt layout, loss masking and output splitting.
//!
//! Training layout, one slot per model position:
//!
//! ```text
//! <bos> <>audio<> a_1 .. a_T <>transcript<> s_1 .. s_m <>translation<> u_1 .. u_n <eos>
//! ```
//!
//! Position `i` predicts the token in slot `i + 1`. Only predictions of slots
//! strictly after `<>transcript<>` contribute to the loss: the `m` transcript
//! tokens, `<>translation<>`, the `n` translation tokens and `<eos>`. The
//! inference prompt is the same layout cut right after `<>transcript<>`.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use crate::tensor::Matrix;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const AUDIO_SEP: &str = "<>audio<>";
pub const TRANSCRIPT_SEP: &str = "<>transcript<>";
pub const TRANSLATION_SEP: &str = "<>translation<>";
pub const RESERVED: [&str; 5] = [BOS, EOS, AUDIO_SEP, TRANSCRIPT_SEP, TRANSLATION_SEP];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("empty transcript")]
    EmptyTranscript,
    #[error("empty translation")]
    EmptyTranslation,
    #[error("audio embedding has no frames")]
    EmptyAudio,
    #[error("embedding width mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("token id {0} outside the vocabulary")]
    IdOutOfRange(usize),
    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),
    #[error("vocabulary is missing reserved token {0}")]
    MissingReserved(&'static str),
    #[error("vocabulary lists {0:?} twice")]
    DuplicateToken(String),
    #[error("generated output has no {TRANSLATION_SEP} separator (transcript so far: {transcript_so_far:?})")]
    MalformedOutput { transcript_so_far: String },
    #[error("vocabulary file: {0}")]
    Io(String),
}

/// Word-level token ↔ id bijection with the five reserved tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    bos: usize,
    eos: usize,
    audio: usize,
    transcript: usize,
    translation: usize,
}

impl Vocabulary {
    /// Reserved tokens take ids 0..5 in [`RESERVED`] order, then every
    /// distinct whitespace-separated word of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<&str> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .filter(|w| !RESERVED.contains(w))
            .collect();
        let tokens = RESERVED
            .iter()
            .copied()
            .chain(words)
            .map(String::from)
            .collect();
        Self::from_tokens(tokens).expect("built vocabulary is well-formed")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, PromptError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(PromptError::DuplicateToken(t.clone()));
            }
        }
        let find = |name: &'static str| {
            index
                .get(name)
                .copied()
                .ok_or(PromptError::MissingReserved(name))
        };
        Ok(Self {
            bos: find(BOS)?,
            eos: find(EOS)?,
            audio: find(AUDIO_SEP)?,
            transcript: find(TRANSCRIPT_SEP)?,
            translation: find(TRANSLATION_SEP)?,
            index,
            tokens,
        })
    }

    /// One token per line; the id is the zero-based line number.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self, PromptError> {
        Self::from_tokens(text.lines().map(String::from).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PromptError> {
        fs::write(path, self.to_text()).map_err(|e| PromptError::Io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let text = fs::read_to_string(path).map_err(|e| PromptError::Io(e.to_string()))?;
        Self::from_text(&text)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> usize {
        self.bos
    }
    pub fn eos(&self) -> usize {
        self.eos
    }
    pub fn audio_sep(&self) -> usize {
        self.audio
    }
    pub fn transcript_sep(&self) -> usize {
        self.transcript
    }
    pub fn translation_sep(&self) -> usize {
        self.translation
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>, PromptError> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| PromptError::UnknownWord(w.to_string()))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), PromptError> {
        match ids.iter().find(|&&i| i >= self.len()) {
            Some(&bad) => Err(PromptError::IdOutOfRange(bad)),
            None => Ok(()),
        }
    }
}

/// What occupies one model position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Token(usize),
    /// Row index into the prompt's audio embedding.
    Audio(usize),
}

/// A slot sequence plus the audio rows it refers to.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub slots: Vec<Slot>,
    pub audio: Matrix,
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Materializes the `L × d_model` embedding sequence.
    pub fn embed_seq(&self, token_embedding: &Matrix) -> Result<Matrix, PromptError> {
        let d = token_embedding.cols();
        if self.audio.cols() != d {
            return Err(PromptError::DimMismatch {
                expected: d,
                found: self.audio.cols(),
            });
        }
        let mut out = Matrix::zeros(self.slots.len(), d);
        for (i, slot) in self.slots.iter().enumerate() {
            let src = match *slot {
                Slot::Token(id) if id < token_embedding.rows() => token_embedding.row(id),
                Slot::Token(id) => return Err(PromptError::IdOutOfRange(id)),
                Slot::Audio(t) => self.audio.row(t),
            };
            out.row_mut(i).copy_from_slice(src);
        }
        Ok(out)
    }

    /// Appends generated tokens after the prompt.
    pub fn extended(&self, ids: &[usize]) -> Prompt {
        let mut slots = self.slots.clone();
        slots.extend(ids.iter().map(|&i| Slot::Token(i)));
        Prompt {
            slots,
            audio: self.audio.clone(),
        }
    }
}

/// One training example in next-token form.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSample {
    pub prompt: Prompt,
    /// `target_ids[i]` is what position `i` should predict. Masked-out
    /// positions hold a placeholder.
    pub target_ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
    /// Slot range holding the transcript tokens.
    pub transcript_span: Range<usize>,
    /// Slot range holding the translation tokens.
    pub translation_span: Range<usize>,
}

impl PromptSample {
    pub fn len(&self) -> usize {
        self.prompt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompt.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    pub fn embed_seq(&self, token_embedding: &Matrix) -> Result<Matrix, PromptError> {
        self.prompt.embed_seq(token_embedding)
    }

    fn span_ids(&self, span: &Range<usize>) -> Vec<usize> {
        self.prompt.slots[span.clone()]
            .iter()
            .filter_map(|s| match s {
                Slot::Token(id) => Some(*id),
                Slot::Audio(_) => None,
            })
            .collect()
    }

    pub fn transcript_ids(&self) -> Vec<usize> {
        self.span_ids(&self.transcript_span)
    }

    pub fn translation_ids(&self) -> Vec<usize> {
        self.span_ids(&self.translation_span)
    }
}

fn prompt_prefix(audio_emb: &Matrix, vocab: &Vocabulary) -> Result<Vec<Slot>, PromptError> {
    if audio_emb.rows() == 0 {
        return Err(PromptError::EmptyAudio);
    }
    let mut slots = Vec::with_capacity(audio_emb.rows() + 3);
    slots.push(Slot::Token(vocab.bos()));
    slots.push(Slot::Token(vocab.audio_sep()));
    slots.extend((0..audio_emb.rows()).map(Slot::Audio));
    slots.push(Slot::Token(vocab.transcript_sep()));
    Ok(slots)
}

pub fn assemble_training_sample(
    audio_emb: &Matrix,
    transcript_ids: &[usize],
    translation_ids: &[usize],
    vocab: &Vocabulary,
) -> Result<PromptSample, PromptError> {
    if transcript_ids.is_empty() {
        return Err(PromptError::EmptyTranscript);
    }
    if translation_ids.is_empty() {
        return Err(PromptError::EmptyTranslation);
    }
    vocab.check_ids(transcript_ids)?;
    vocab.check_ids(translation_ids)?;

    let mut slots = prompt_prefix(audio_emb, vocab)?;
    // everything predicted from here on is trained
    let first_trained = slots.len() - 1;
    let tr_start = slots.len();
    slots.extend(transcript_ids.iter().map(|&i| Slot::Token(i)));
    let tr_end = slots.len();
    slots.push(Slot::Token(vocab.translation_sep()));
    let tl_start = slots.len();
    slots.extend(translation_ids.iter().map(|&i| Slot::Token(i)));
    let tl_end = slots.len();
    slots.push(Slot::Token(vocab.eos()));

    let len = slots.len();
    let mut target_ids = Vec::with_capacity(len);
    let mut loss_mask = Vec::with_capacity(len);
    for i in 0..len {
        let next = slots.get(i + 1);
        target_ids.push(match next {
            Some(Slot::Token(id)) => *id,
            _ => vocab.bos(),
        });
        loss_mask.push(i >= first_trained && i + 1 < len);
    }

    Ok(PromptSample {
        prompt: Prompt {
            slots,
            audio: audio_emb.clone(),
        },
        target_ids,
        loss_mask,
        transcript_span: tr_start..tr_end,
        translation_span: tl_start..tl_end,
    })
}

pub fn assemble_inference_prompt(
    audio_emb: &Matrix,
    vocab: &Vocabulary,
) -> Result<Prompt, PromptError> {
    Ok(Prompt {
        slots: prompt_prefix(audio_emb, vocab)?,
        audio: audio_emb.clone(),
    })
}

/// Splits a post-prompt generation at the first `<>translation<>`.
///
/// The translation runs up to `<eos>` or the end of the generation.
pub fn split_output(
    generated_ids: &[usize],
    vocab: &Vocabulary,
) -> Result<(String, String), PromptError> {
    let eos_at = generated_ids
        .iter()
        .position(|&i| i == vocab.eos())
        .unwrap_or(generated_ids.len());
    let body = &generated_ids[..eos_at];
    match body.iter().position(|&i| i == vocab.translation_sep()) {
        Some(sep) => Ok((vocab.decode(&body[..sep]), vocab.decode(&body[sep + 1..]))),
        None => Err(PromptError::MalformedOutput {
            transcript_so_far: vocab.decode(body),
        }),
    }
}
