//! End-to-end training and inference: features -> adapter -> projection ->
//! prompt -> language model -> decoder.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{
    conv_backward, conv_forward, ctc_collapse, projection_backward, projection_forward,
    AdapterError, ConvAdapterParams, FrameClassifier, FrameLabels, ProjectionParams,
};
use crate::data::{DataError, FeatureSequence, Manifest, ManifestRecord};
use crate::decoding::{beam_search, BeamConfig, DecodeError, PromptedLm};
use crate::microlm::{
    backward, forward_cached, masked_nll_with_grad, train, AdamState, Checkpoint, CheckpointError,
    LmConfig, LmError, LmParams, LoraConfig, LoraPair, LoraParams, LossCurve, TrainConfig,
    Trainable,
};
use crate::promptfmt::{
    assemble_inference_prompt, assemble_training_sample, split_output, PromptError, Slot,
    Vocabulary,
};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("record {id}: {message}")]
    Record { id: String, message: String },
    #[error("checkpoint does not match: {0}")]
    Mismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterKind {
    #[serde(rename = "ctc_collapse")]
    CtcCollapse,
    #[serde(rename = "conv5x5")]
    Conv5x5,
}

/// Where frame labels for the CTC-collapse path come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// The `labels` field of each manifest record.
    #[default]
    Manifest,
    /// A frozen linear frame classifier fitted on the training manifest.
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub tied_head: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 48,
            tied_head: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub beam: usize,
    pub max_len: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self {
            beam: 2,
            max_len: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.5,
        }
    }
}

/// Text-only training of the base model before fine-tuning, standing in for
/// a pretrained language model. Audio slots hold the embeddings of the
/// transcript words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    /// Zero disables pretraining.
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    /// `transcript<TAB>translation` file, relative to the manifest directory.
    pub corpus: String,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            steps: 0,
            peak_lr: 1e-3,
            warmup_steps: 10,
            batch_size: 8,
            corpus: crate::data::synth::TEXT_CORPUS_FILE.to_string(),
        }
    }
}

impl PretrainSection {
    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
            batch_size: self.batch_size,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub adapter: AdapterKind,
    /// Encoder feature width `d` of the feature files.
    pub feature_dim: usize,
    /// Output width of the convolution; the feature width when unset.
    pub conv_d_out: Option<usize>,
    pub keep_blanks: bool,
    pub labels: LabelSource,
    pub blank_id: u32,
    /// Seed for parameter initialization.
    pub init_seed: u64,
    pub model: ModelSection,
    /// Low-rank mode when present: only adapters, projection and LoRA
    /// pairs are trained.
    pub lora: Option<LoraConfig>,
    pub train: TrainConfig,
    pub decode: DecodeSection,
    pub classifier: ClassifierSection,
    pub pretrain: PretrainSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            adapter: AdapterKind::CtcCollapse,
            feature_dim: 16,
            conv_d_out: None,
            keep_blanks: false,
            labels: LabelSource::Manifest,
            blank_id: 0,
            init_seed: 0,
            model: ModelSection::default(),
            lora: None,
            train: TrainConfig::default(),
            decode: DecodeSection::default(),
            classifier: ClassifierSection::default(),
            pretrain: PretrainSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if self.conv_d_out == Some(0) {
            return bad("conv_d_out must be positive");
        }
        if self.decode.beam == 0 {
            return bad("decode.beam must be >= 1");
        }
        if self.decode.max_len == 0 {
            return bad("decode.max_len must be >= 1");
        }
        if let Some(l) = &self.lora {
            if l.r == 0 || l.targets.is_empty() {
                return bad("lora.r must be >= 1 with at least one target");
            }
        }
        self.train.validate()?;
        if self.pretrain.steps > 0 {
            self.pretrain.train_config(0).validate()?;
        }
        Ok(())
    }

    pub fn adapter_width(&self) -> usize {
        match self.adapter {
            AdapterKind::CtcCollapse => self.feature_dim,
            AdapterKind::Conv5x5 => self.conv_d_out.unwrap_or(self.feature_dim),
        }
    }

    pub fn lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            max_len: self.model.max_len,
            tied_head: self.model.tied_head,
        }
    }
}

/// Every learnable tensor of the speech-to-text model.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeechLm {
    pub config: PipelineConfig,
    pub vocab: Vocabulary,
    pub conv: Option<ConvAdapterParams>,
    pub proj: ProjectionParams,
    pub lm: LmParams,
    pub lora: Option<LoraParams>,
    pub classifier: Option<FrameClassifier>,
}

impl SpeechLm {
    pub fn init(config: &PipelineConfig, vocab: Vocabulary) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let lm_cfg = config.lm_config(vocab.len());
        let lm = LmParams::init(&lm_cfg, &mut rng)?;
        let conv = match config.adapter {
            AdapterKind::Conv5x5 => Some(ConvAdapterParams::init(
                config.feature_dim,
                config.adapter_width(),
                &mut rng,
            )),
            AdapterKind::CtcCollapse => None,
        };
        let proj = ProjectionParams::init(config.adapter_width(), lm_cfg.d_model, &mut rng);
        let lora = match &config.lora {
            Some(l) => {
                let mut blocks = Vec::with_capacity(lm.blocks.len());
                for block in &lm.blocks {
                    let mut pairs = BTreeMap::new();
                    for &t in &l.targets {
                        let w = block.weight(t);
                        pairs.insert(t, LoraPair::init(w.rows(), w.cols(), l.r, &mut rng)?);
                    }
                    blocks.push(pairs);
                }
                Some(LoraParams {
                    scaling: l.scaling(),
                    blocks,
                })
            }
            None => None,
        };
        Ok(Self {
            config: config.clone(),
            vocab,
            conv,
            proj,
            lm,
            lora,
            classifier: None,
        })
    }

    /// Named views of every tensor, including frozen ones.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        if let Some(c) = &self.conv {
            for (j, tap) in c.kernel.iter().enumerate() {
                out.push((
                    format!("conv.tap{j}"),
                    vec![tap.rows(), tap.cols()],
                    tap.as_slice(),
                ));
            }
            out.push(("conv.bias".into(), vec![c.bias.len()], c.bias.as_slice()));
        }
        out.push((
            "proj.weight".into(),
            vec![self.proj.weight.rows(), self.proj.weight.cols()],
            self.proj.weight.as_slice(),
        ));
        out.push((
            "proj.bias".into(),
            vec![self.proj.bias.len()],
            self.proj.bias.as_slice(),
        ));
        for (name, v) in self.lm.tensors() {
            out.push((format!("lm.{name}"), vec![v.len()], v));
        }
        if let Some(l) = &self.lora {
            for (name, v) in l.tensors() {
                out.push((name, vec![v.len()], v));
            }
        }
        if let Some(c) = &self.classifier {
            out.push((
                "classifier.weight".into(),
                vec![c.weight.rows(), c.weight.cols()],
                c.weight.as_slice(),
            ));
            out.push((
                "classifier.bias".into(),
                vec![c.bias.len()],
                c.bias.as_slice(),
            ));
        }
        out
    }

    /// Trainable tensors by checkpoint name.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        if let Some(c) = &mut self.conv {
            for (j, tap) in c.kernel.iter_mut().enumerate() {
                out.push((format!("conv.tap{j}"), tap.as_mut_slice()));
            }
            out.push(("conv.bias".into(), c.bias.as_mut_slice()));
        }
        out.push(("proj.weight".into(), self.proj.weight.as_mut_slice()));
        out.push(("proj.bias".into(), self.proj.bias.as_mut_slice()));
        for (name, v) in self.lm.tensors_mut() {
            out.push((format!("lm.{name}"), v));
        }
        if let Some(l) = &mut self.lora {
            out.extend(l.tensors_mut());
        }
        if let Some(c) = &mut self.classifier {
            out.push(("classifier.weight".into(), c.weight.as_mut_slice()));
            out.push(("classifier.bias".into(), c.bias.as_mut_slice()));
        }
        out
    }

    /// Whether the base language model is trained (full mode) or frozen (low-rank mode).
    pub fn base_trainable(&self) -> bool {
        self.lora.is_none()
    }

    /// Frame labels for the collapse path.
    pub fn frame_labels(
        &self,
        record: &ManifestRecord,
        frames: &Matrix,
    ) -> Result<FrameLabels, PipelineError> {
        match self.config.labels {
            LabelSource::Manifest => match &record.labels {
                Some(l) => Ok(FrameLabels {
                    labels: l.clone(),
                    blank_id: self.config.blank_id,
                }),
                None => Err(PipelineError::Record {
                    id: record.id.clone(),
                    message: "no frame labels in manifest".into(),
                }),
            },
            LabelSource::Classifier => match &self.classifier {
                Some(c) => Ok(c.labels(frames)?),
                None => Err(PipelineError::Config(
                    "frame classifier has not been fitted".into(),
                )),
            },
        }
    }

    /// Adapter input for one record: collapsed frames, or the raw frames
    /// for the convolution path.
    pub fn adapter_input(
        &self,
        record: &ManifestRecord,
        seq: &FeatureSequence,
    ) -> Result<Matrix, PipelineError> {
        if seq.dim() != self.config.feature_dim {
            return Err(PipelineError::Mismatch(format!(
                "record {} has feature dim {}, model expects {}",
                record.id,
                seq.dim(),
                self.config.feature_dim
            )));
        }
        let frames = seq.to_matrix();
        match self.config.adapter {
            AdapterKind::CtcCollapse => {
                let labels = self.frame_labels(record, &frames)?;
                Ok(ctc_collapse(&frames, &labels, self.config.keep_blanks)?)
            }
            AdapterKind::Conv5x5 => Ok(frames),
        }
    }

    /// Audio rows in model width.
    pub fn audio_embedding(&self, adapter_input: &Matrix) -> Result<Matrix, PipelineError> {
        let shortened = match &self.conv {
            Some(c) => conv_forward(adapter_input, c)?,
            None => adapter_input.clone(),
        };
        Ok(projection_forward(&shortened, &self.proj)?)
    }

    /// Decodes one prepared adapter input into generated ids.
    pub fn generate(&self, adapter_input: &Matrix) -> Result<Vec<usize>, PipelineError> {
        let audio = self.audio_embedding(adapter_input)?;
        let prompt = assemble_inference_prompt(&audio, &self.vocab)?;
        let embedded = prompt.embed_seq(&self.lm.tok_emb)?;
        let model = PromptedLm {
            params: &self.lm,
            lora: self.lora.as_ref(),
            prompt: &embedded,
        };
        let max_len = self.config.decode.max_len.min(model.capacity());
        if max_len == 0 {
            return Err(LmError::TooLong {
                len: embedded.rows(),
                max: self.config.model.max_len,
            }
            .into());
        }
        let cfg = BeamConfig::new(self.config.decode.beam, max_len, self.vocab.eos());
        Ok(beam_search(&model, &cfg)?.output().to_vec())
    }

    pub fn to_checkpoint(&self, adam: Option<&AdamState>) -> Checkpoint {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            classifier_labels: self.classifier.as_ref().map(|c| c.weight.cols()),
        };
        let mut ck = Checkpoint::new(serde_json::to_string(&meta).expect("meta serializes"));
        for (name, shape, data) in self.tensors() {
            ck.insert(name, shape, data.to_vec());
        }
        if let Some(a) = adam {
            ck.insert("adam.step", vec![], vec![a.step as f64]);
            for (name, (m, v)) in &a.moments {
                ck.insert(format!("adam.m.{name}"), vec![m.len()], m.clone());
                ck.insert(format!("adam.v.{name}"), vec![v.len()], v.clone());
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, AdamState), PipelineError> {
        let meta: CheckpointMeta = serde_json::from_str(&ck.config_json)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let vocab = Vocabulary::from_tokens(meta.vocab)?;
        let mut model = Self::init(&meta.config, vocab)?;
        if let Some(n) = meta.classifier_labels {
            model.classifier = Some(FrameClassifier {
                weight: Matrix::zeros(meta.config.feature_dim, n),
                bias: vec![0.0; n],
                blank_id: meta.config.blank_id,
            });
        }
        for (name, dst) in model.tensors_mut() {
            ck.copy_into(&name, dst)?;
        }
        let mut adam = AdamState::default();
        if let Ok(step) = ck.get("adam.step") {
            adam.step = step.data[0] as u64;
            for (name, t) in &ck.tensors {
                if let Some(param) = name.strip_prefix("adam.m.") {
                    let v = ck.get(&format!("adam.v.{param}"))?;
                    adam.moments
                        .insert(param.to_string(), (t.data.clone(), v.data.clone()));
                }
            }
        }
        Ok((model, adam))
    }

    pub fn save(&self, adam: Option<&AdamState>, path: &Path) -> Result<(), PipelineError> {
        Ok(self.to_checkpoint(adam).save(path)?)
    }

    pub fn load(path: &Path) -> Result<(Self, AdamState), PipelineError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: PipelineConfig,
    vocab: Vec<String>,
    classifier_labels: Option<usize>,
}

/// A training record with its adapter input and target ids resolved.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub id: String,
    pub adapter_input: Matrix,
    pub transcript_ids: Vec<usize>,
    pub translation_ids: Vec<usize>,
}

/// The model together with its prepared training set.
pub struct TrainingRun {
    pub model: SpeechLm,
    pub examples: Vec<PreparedExample>,
}

fn add_into(dst: &mut BTreeMap<String, Vec<f64>>, name: String, g: &[f64]) {
    match dst.get_mut(&name) {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => {
            dst.insert(name, g.to_vec());
        }
    }
}

impl TrainingRun {
    /// Summed masked NLL and gradients of one example, scaled by `1 / normalizer`.
    pub fn example_grads(
        &self,
        ex: &PreparedExample,
        normalizer: f64,
    ) -> Result<(f64, BTreeMap<String, Vec<f64>>), PipelineError> {
        let m = &self.model;
        let shortened = match &m.conv {
            Some(c) => conv_forward(&ex.adapter_input, c)?,
            None => ex.adapter_input.clone(),
        };
        let audio = projection_forward(&shortened, &m.proj)?;
        let sample =
            assemble_training_sample(&audio, &ex.transcript_ids, &ex.translation_ids, &m.vocab)?;
        let x = sample.embed_seq(&m.lm.tok_emb)?;
        let (logits, cache) = forward_cached(&m.lm, m.lora.as_ref(), &x)?;
        let (nll, dlogits) =
            masked_nll_with_grad(&logits, &sample.target_ids, &sample.loss_mask, normalizer)?;
        let (mut g_lm, g_lora, dx) = backward(&m.lm, m.lora.as_ref(), &cache, &dlogits)?;

        let mut d_audio = Matrix::zeros(audio.rows(), audio.cols());
        for (i, slot) in sample.prompt.slots.iter().enumerate() {
            match *slot {
                Slot::Audio(t) => d_audio.row_mut(t).copy_from_slice(dx.row(i)),
                Slot::Token(id) => {
                    for (g, v) in g_lm.tok_emb.row_mut(id).iter_mut().zip(dx.row(i)) {
                        *g += v;
                    }
                }
            }
        }
        let (d_short, g_proj) = projection_backward(&shortened, &m.proj, &d_audio)?;

        let mut grads = BTreeMap::new();
        if let Some(c) = &m.conv {
            // the gradient with respect to the encoder features is discarded
            let (_, g_conv) = conv_backward(&ex.adapter_input, c, &d_short)?;
            for (j, tap) in g_conv.kernel.iter().enumerate() {
                grads.insert(format!("conv.tap{j}"), tap.as_slice().to_vec());
            }
            grads.insert("conv.bias".into(), g_conv.bias);
        }
        grads.insert("proj.weight".into(), g_proj.weight.into_vec());
        grads.insert("proj.bias".into(), g_proj.bias);
        match g_lora {
            Some(gl) => {
                for (name, v) in gl.tensors() {
                    grads.insert(name, v.to_vec());
                }
            }
            None => {
                for (name, v) in g_lm.tensors() {
                    grads.insert(format!("lm.{name}"), v.to_vec());
                }
            }
        }
        Ok((nll, grads))
    }

    /// Mean masked loss over the given examples, without gradients.
    pub fn mean_loss(&self, indices: &[usize]) -> Result<f64, PipelineError> {
        let mut total = 0.0;
        let mut count = 0usize;
        for &i in indices {
            let ex = &self.examples[i];
            let m = &self.model;
            let audio = m.audio_embedding(&ex.adapter_input)?;
            let sample = assemble_training_sample(
                &audio,
                &ex.transcript_ids,
                &ex.translation_ids,
                &m.vocab,
            )?;
            let x = sample.embed_seq(&m.lm.tok_emb)?;
            let (logits, _) = forward_cached(&m.lm, m.lora.as_ref(), &x)?;
            let (nll, _) =
                masked_nll_with_grad(&logits, &sample.target_ids, &sample.loss_mask, 1.0)?;
            total += nll;
            count += sample.masked_count();
        }
        Ok(total / count as f64)
    }

    pub fn full_loss(&self) -> Result<f64, PipelineError> {
        self.mean_loss(&(0..self.examples.len()).collect::<Vec<_>>())
    }
}

fn masked_tokens(ex: &PreparedExample) -> usize {
    ex.transcript_ids.len() + ex.translation_ids.len() + 2
}

impl Trainable for TrainingRun {
    fn n_examples(&self) -> usize {
        self.examples.len()
    }

    fn loss_and_grads(
        &self,
        batch: &[usize],
    ) -> Result<(f64, BTreeMap<String, Vec<f64>>), LmError> {
        let normalizer: usize = batch
            .iter()
            .map(|&i| masked_tokens(&self.examples[i]))
            .sum();
        let normalizer = normalizer as f64;
        let parts: Vec<_> = batch
            .par_iter()
            .map(|&i| self.example_grads(&self.examples[i], normalizer))
            .collect();
        let mut loss = 0.0;
        let mut grads = BTreeMap::new();
        for part in parts {
            let (nll, g) = part.map_err(into_lm_error)?;
            loss += nll;
            for (name, v) in g {
                add_into(&mut grads, name, &v);
            }
        }
        Ok((loss / normalizer, grads))
    }

    fn trainable_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.model.tensors_mut()
    }
}

/// Builds the vocabulary from a manifest's transcripts and translations and
/// any extra text pairs.
pub fn build_vocabulary(manifest: &Manifest, text_pairs: &[(String, String)]) -> Vocabulary {
    let texts: Vec<&str> = manifest
        .records()
        .iter()
        .flat_map(|r| std::iter::once(r.transcript.as_str()).chain(r.translation.as_deref()))
        .chain(
            text_pairs
                .iter()
                .flat_map(|(a, b)| [a.as_str(), b.as_str()]),
        )
        .collect();
    Vocabulary::build(texts)
}

/// The base model on text pairs, with transcript word embeddings in the audio slots.
pub struct TextRun {
    pub lm: LmParams,
    pub vocab: Vocabulary,
    pub pairs: Vec<(Vec<usize>, Vec<usize>)>,
}

impl TextRun {
    fn pair_grads(
        &self,
        src: &[usize],
        tgt: &[usize],
        normalizer: f64,
    ) -> Result<(f64, LmParams), PipelineError> {
        let d = self.lm.config.d_model;
        let mut audio = Matrix::zeros(src.len(), d);
        for (t, &id) in src.iter().enumerate() {
            audio.row_mut(t).copy_from_slice(self.lm.tok_emb.row(id));
        }
        let sample = assemble_training_sample(&audio, src, tgt, &self.vocab)?;
        let x = sample.embed_seq(&self.lm.tok_emb)?;
        let (logits, cache) = forward_cached(&self.lm, None, &x)?;
        let (nll, dlogits) =
            masked_nll_with_grad(&logits, &sample.target_ids, &sample.loss_mask, normalizer)?;
        let (mut g, _, dx) = backward(&self.lm, None, &cache, &dlogits)?;
        for (i, slot) in sample.prompt.slots.iter().enumerate() {
            let id = match *slot {
                Slot::Audio(t) => src[t],
                Slot::Token(id) => id,
            };
            for (a, v) in g.tok_emb.row_mut(id).iter_mut().zip(dx.row(i)) {
                *a += v;
            }
        }
        Ok((nll, g))
    }
}

impl Trainable for TextRun {
    fn n_examples(&self) -> usize {
        self.pairs.len()
    }

    fn loss_and_grads(
        &self,
        batch: &[usize],
    ) -> Result<(f64, BTreeMap<String, Vec<f64>>), LmError> {
        let normalizer = batch
            .iter()
            .map(|&i| self.pairs[i].0.len() + self.pairs[i].1.len() + 2)
            .sum::<usize>() as f64;
        let parts: Vec<_> = batch
            .par_iter()
            .map(|&i| self.pair_grads(&self.pairs[i].0, &self.pairs[i].1, normalizer))
            .collect();
        let mut loss = 0.0;
        let mut grads = BTreeMap::new();
        for part in parts {
            let (nll, g) = part.map_err(into_lm_error)?;
            loss += nll;
            for (name, v) in g.tensors() {
                add_into(&mut grads, format!("lm.{name}"), v);
            }
        }
        Ok((loss / normalizer, grads))
    }

    fn trainable_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.lm
            .tensors_mut()
            .into_iter()
            .map(|(n, v)| (format!("lm.{n}"), v))
            .collect()
    }
}

fn into_lm_error(e: PipelineError) -> LmError {
    match e {
        PipelineError::Lm(l) => l,
        other => LmError::Shape(other.to_string()),
    }
}

/// Initializes the model, fits the frame classifier if configured and
/// resolves every training record.
pub fn prepare_training(
    config: &PipelineConfig,
    manifest: &Manifest,
) -> Result<TrainingRun, PipelineError> {
    config.validate()?;
    if manifest.is_empty() {
        return Err(PipelineError::Config("training manifest is empty".into()));
    }
    let text_pairs = if config.pretrain.steps > 0 {
        crate::data::synth::read_text_pairs(manifest.base_dir().join(&config.pretrain.corpus))?
    } else {
        Vec::new()
    };
    let vocab = build_vocabulary(manifest, &text_pairs);
    let mut model = SpeechLm::init(config, vocab)?;
    if config.pretrain.steps > 0 {
        let mut pairs = Vec::with_capacity(text_pairs.len());
        for (a, b) in &text_pairs {
            pairs.push((model.vocab.encode(a)?, model.vocab.encode(b)?));
        }
        let mut text = TextRun {
            lm: model.lm.clone(),
            vocab: model.vocab.clone(),
            pairs,
        };
        train(
            &mut text,
            &mut AdamState::default(),
            &config.pretrain.train_config(config.train.seed),
            |_, _| {},
        )?;
        model.lm = text.lm;
    }

    let mut features = Vec::with_capacity(manifest.len());
    for r in manifest.records() {
        features.push(manifest.load_features(r)?);
    }
    if config.adapter == AdapterKind::CtcCollapse && config.labels == LabelSource::Classifier {
        let frames: Vec<Matrix> = features.iter().map(FeatureSequence::to_matrix).collect();
        let mut labels = Vec::with_capacity(frames.len());
        for r in manifest.records() {
            labels.push(r.labels.clone().ok_or_else(|| PipelineError::Record {
                id: r.id.clone(),
                message: "fitting the frame classifier needs frame labels".into(),
            })?);
        }
        let n_labels = labels.iter().flatten().copied().max().unwrap_or(0) as usize + 1;
        let n_labels = n_labels.max(config.blank_id as usize + 1).max(2);
        model.classifier = Some(FrameClassifier::train(
            &frames,
            &labels,
            n_labels,
            config.blank_id,
            config.classifier.epochs,
            config.classifier.lr,
        )?);
    }

    let mut examples = Vec::with_capacity(manifest.len());
    for (r, seq) in manifest.records().iter().zip(&features) {
        let translation = r
            .translation
            .as_deref()
            .ok_or_else(|| PipelineError::Record {
                id: r.id.clone(),
                message: "training records need a translation".into(),
            })?;
        examples.push(PreparedExample {
            id: r.id.clone(),
            adapter_input: model.adapter_input(r, seq)?,
            transcript_ids: model.vocab.encode(&r.transcript)?,
            translation_ids: model.vocab.encode(translation)?,
        });
    }
    Ok(TrainingRun { model, examples })
}

pub struct TrainingOutcome {
    pub model: SpeechLm,
    pub adam: AdamState,
    pub curve: LossCurve,
    /// Mean masked loss over the whole training set after the last step.
    pub final_loss: f64,
}

/// Trains from scratch per `config`. `on_step` sees each step's batch loss.
pub fn run_training(
    config: &PipelineConfig,
    manifest: &Manifest,
    on_step: impl FnMut(usize, f64),
) -> Result<TrainingOutcome, PipelineError> {
    let mut run = prepare_training(config, manifest)?;
    let mut adam = AdamState::default();
    let curve = train(&mut run, &mut adam, &config.train, on_step)?;
    let final_loss = run.full_loss()?;
    Ok(TrainingOutcome {
        model: run.model,
        adam,
        curve,
        final_loss,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum RecordOutput {
    Decoded {
        transcript: String,
        translation: String,
    },
    /// No `<>translation<>` was generated; the partial transcript is kept.
    Malformed {
        transcript_so_far: String,
    },
    Failed {
        message: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceRecord {
    pub id: String,
    pub output: RecordOutput,
}

impl InferenceRecord {
    pub fn transcript(&self) -> &str {
        match &self.output {
            RecordOutput::Decoded { transcript, .. } => transcript,
            RecordOutput::Malformed { transcript_so_far } => transcript_so_far,
            RecordOutput::Failed { .. } => "",
        }
    }

    pub fn translation(&self) -> &str {
        match &self.output {
            RecordOutput::Decoded { translation, .. } => translation,
            _ => "",
        }
    }
}

fn infer_record(model: &SpeechLm, manifest: &Manifest, record: &ManifestRecord) -> RecordOutput {
    let attempt = || -> Result<RecordOutput, PipelineError> {
        let seq = manifest.load_features(record)?;
        let input = model.adapter_input(record, &seq)?;
        let ids = model.generate(&input)?;
        Ok(match split_output(&ids, &model.vocab) {
            Ok((transcript, translation)) => RecordOutput::Decoded {
                transcript,
                translation,
            },
            Err(PromptError::MalformedOutput { transcript_so_far }) => {
                RecordOutput::Malformed { transcript_so_far }
            }
            Err(e) => return Err(e.into()),
        })
    };
    attempt().unwrap_or_else(|e| RecordOutput::Failed {
        message: e.to_string(),
    })
}

/// Decodes every record. Per-record problems are reported in place; the
/// output order follows the manifest.
pub fn run_inference(model: &SpeechLm, manifest: &Manifest) -> Vec<InferenceRecord> {
    manifest
        .records()
        .par_iter()
        .map(|r| InferenceRecord {
            id: r.id.clone(),
            output: infer_record(model, manifest, r),
        })
        .collect()
}
