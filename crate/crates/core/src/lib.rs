//! Sentiment regression from language, acoustic, and visual streams when parts
//! of the input are missing.
//!
//! The pipeline has three stages: estimate how complete each modality is,
//! rebuild damaged modalities from the shared semantics of the healthy ones
//! (weighted by the estimated completeness), and fuse the result around the
//! most trustworthy modality for the final prediction.
//!
//! Everything is deterministic given a seed: random draws go through a
//! counter-based generator, parallel loops write disjoint output regions, and
//! reductions run in a fixed order, so repeated runs agree bitwise.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod missingness;
pub mod model;
pub mod nn;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{IfusionError, Result};
pub use rng::CounterRng;
pub use tensor::Tensor;

/// The three input streams, in the fixed order used for every reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Language,
    Acoustic,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Language, Modality::Acoustic, Modality::Visual];

    pub fn index(self) -> usize {
        match self {
            Modality::Language => 0,
            Modality::Acoustic => 1,
            Modality::Visual => 2,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Modality::Language => "l",
            Modality::Acoustic => "a",
            Modality::Visual => "v",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short_name())
    }
}

/// One value per modality, indexable by [`Modality`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct PerModality<T> {
    pub l: T,
    pub a: T,
    pub v: T,
}

impl<T> PerModality<T> {
    pub fn new(l: T, a: T, v: T) -> Self {
        Self { l, a, v }
    }

    pub fn from_fn(mut f: impl FnMut(Modality) -> T) -> Self {
        Self {
            l: f(Modality::Language),
            a: f(Modality::Acoustic),
            v: f(Modality::Visual),
        }
    }

    pub fn get(&self, m: Modality) -> &T {
        match m {
            Modality::Language => &self.l,
            Modality::Acoustic => &self.a,
            Modality::Visual => &self.v,
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> &mut T {
        match m {
            Modality::Language => &mut self.l,
            Modality::Acoustic => &mut self.a,
            Modality::Visual => &mut self.v,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> PerModality<U> {
        PerModality {
            l: f(&self.l),
            a: f(&self.a),
            v: f(&self.v),
        }
    }

    /// Iterate in the fixed (language, acoustic, visual) order.
    pub fn iter(&self) -> impl Iterator<Item = (Modality, &T)> {
        Modality::ALL.iter().map(move |&m| (m, self.get(m)))
    }
}
