//! Microstructure-evolution digital libraries (fatigue crack growth and
//! Gray-Scott Turing patterns) and from-scratch artificial and spiking
//! sequence predictors trained on them.

pub mod field;
pub mod turing;
pub mod fcg;
pub mod nn;
pub mod spiking;
pub mod models;
pub mod eval;
