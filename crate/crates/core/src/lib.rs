//! Speech-to-text with a frozen encoder, a length adapter and a small causal
//! language model.
//!
//! Pre-computed encoder features are shortened by either a CTC-guided
//! collapse or a strided convolution, projected into the model width and
//! spliced into a text prompt. The model is trained on the masked transcript
//! and translation tokens and decoded with greedy or beam search.

pub mod adapters;
pub mod cli;
pub mod data;
pub mod decoding;
pub mod evalkit;
pub mod microlm;
pub mod pipeline;
pub mod promptfmt;
pub mod tensor;
