//! Library side of the `steer` binary: settings, run manifests and the
//! streaming prediction service.

pub mod manifest;
pub mod settings;
pub mod stream;

pub use manifest::RunManifest;
pub use settings::Settings;
pub use stream::{predict_stream, StreamStats};
