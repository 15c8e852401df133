pub mod cli;
pub mod envs;
pub mod error;
pub mod gradients;
pub mod mdp;
pub mod policy;
pub mod trainers;
pub mod verify;

pub use error::{PepgError, Result};
