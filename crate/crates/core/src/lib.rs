pub mod classic_recon;
pub mod frame;
pub mod numerics;
pub mod par;
pub mod spike_codec;
pub mod spike_sim;
pub mod swinsf;
pub mod train_eval;
