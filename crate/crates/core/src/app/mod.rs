//! Bundles, the simulate pipeline and the HTTP service.

pub mod bundle;
pub mod pipeline;
pub mod server;
pub mod simulate;

pub use bundle::*;
pub use pipeline::*;
pub use server::{error_body, router, schema_json, serve, AppState};
pub use simulate::*;
