//! Neuroevolution of collective-robotics controllers with novelty search over
//! behaviour characterisations derived mechanically from a formal task state.

pub mod analysis;
pub mod evolution;
pub mod experiment;
pub mod formalism;
pub mod geometry;
pub mod novelty;
pub mod sdbc;
pub mod simcore;
pub mod tasks;
