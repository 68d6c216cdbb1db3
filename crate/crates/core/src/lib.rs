//! Desk-scale laboratory for closed-loop supervised fine-tuning of tokenized
//! driving policies: a synthetic multimodal world, token vocabularies, small
//! trainable policies with hand-derived gradients, every rollout strategy
//! under study, and closed-loop evaluation metrics.

pub mod metrics;
pub mod policy;
pub mod rollout;
pub mod scenario;
pub mod training;
pub mod vocabulary;
pub mod world;
