//! Regularized autoencoder for zero-inflated count matrices with a latent
//! prior learned by a generator/critic pair, plus the preprocessing and
//! clustering evaluation around it.

pub mod ndgrad;
pub mod special;
pub mod neuralnet;
pub mod countmodel;
pub mod io;
pub mod model;
pub mod seeding;
pub mod trainer;
pub mod preprocess;
pub mod evalcluster;
