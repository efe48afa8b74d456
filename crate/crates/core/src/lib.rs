//! Processing-timescale mapping for recurrent language models.

pub mod ablation;
pub mod connectivity;
pub mod corpus;
pub mod numerics;
pub mod pipeline;
pub mod rnn;
pub mod timescale;
pub mod trainer;
