//! Desk-scale low-resource machine translation toolkit.

pub mod autodiff;
pub mod seed;
pub mod corpus;
pub mod bpe;
pub mod eval;
pub mod transformer;
pub mod lora;
pub mod distill;
