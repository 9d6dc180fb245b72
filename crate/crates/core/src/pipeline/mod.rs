//! Data and training side: volume I/O, synthetic fragments, lattice
//! sampling, losses, optimizer and the training loop.

pub mod config;
pub mod io;
pub mod loss;
pub mod optim;
pub mod sampling;
pub mod synth;
pub mod train;
