pub mod ddim;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod probe;
pub mod schedule;
pub mod translator;

pub use error::{Result, StsError};
