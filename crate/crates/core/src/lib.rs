//! Dictionary-grounded grapheme-to-phoneme conversion.
//!
//! Polyphonic characters are disambiguated by attending from a per-character semantic
//! context vector to embeddings of the dictionary glosses of each candidate
//! pronunciation. The attention is trained end to end from an acoustic reconstruction
//! loss alone; pronunciation labels are only ever used for evaluation.

pub mod binio;
pub mod dictionary;
pub mod encoders;
pub mod eval;
pub mod numerics;
pub mod pipeline;
pub mod s2pa;
pub mod synthcorpus;
