//! Generative domain adaptation for face anti-spoofing at desk scale.

pub mod rng;
pub mod tensor;
pub mod nn;
pub mod spectrum;
pub mod objectives;

/// Formats a float with 9 significant digits, the precision of every CSV
/// this crate writes.
pub fn fmt9(x: f64) -> String {
    format!("{x:.8e}")
}
pub mod models;
pub mod data;
pub mod pipeline;
pub mod gradsuite;
