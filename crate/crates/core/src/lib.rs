//! Few-shot extractive question answering through synthetic data.
//!
//! A prompted sequence-to-sequence model writes questions for answer
//! candidates found in unlabeled documents; the generated pairs are filtered
//! and used to train a prompted QA model, which is then fine-tuned on the
//! few labeled examples available.
//!
//! The stages live in their own modules: [`answers`] (candidate sampling),
//! [`chunking`], [`template`], [`backend`] (model contract plus a mock and a
//! subprocess client), [`qgen`], [`filter`], [`mrqa`] and [`pipeline`].

pub mod answers;
pub mod backend;
pub mod chunking;
pub mod data;
pub mod error;
pub mod filter;
pub mod jsonl;
pub mod metrics;
pub mod mrqa;
pub mod mrqa_format;
pub mod pipeline;
pub mod qgen;
pub mod seed;
pub mod template;
pub mod training;

pub use data::{Answer, CharSpan, Document, FewShotSplit, Origin, QASample};
pub use error::{Error, Result};
