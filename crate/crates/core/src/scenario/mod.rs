//! Scenario documents, their compilation into runnable specs, trace logs and
//! replay manifests.

mod compile;
mod doc;
mod manifest;
mod trace;

pub use compile::*;
pub use doc::*;
pub use manifest::*;
pub use trace::*;
