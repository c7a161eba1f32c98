//! Treatment policy: shared encoder with imitation and optimal heads.

pub mod model;
pub mod objective;
pub mod train;

pub use model::*;
pub use objective::*;
pub use train::*;
