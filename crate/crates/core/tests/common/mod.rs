#![allow(dead_code)]

pub mod bpe_oracle;
pub mod decoding;
pub mod golden;
pub mod gradcheck;
pub mod scenarios;
