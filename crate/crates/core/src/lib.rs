pub mod bpe;
pub mod classifier;
pub mod cli;
pub mod contrastive;
pub mod encoder;
pub mod evalsuite;
pub mod mlm;
pub mod pooling;
pub mod synth;
pub mod textprep;
pub mod util;
