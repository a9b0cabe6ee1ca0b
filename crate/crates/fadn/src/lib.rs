//! File formats, checkpoints, experiment runners and the command line for
//! [`fadn_core`].
//!
//! - [`io`]: PFM (depth, latents, RGB) and 16-bit PGM depth.
//! - [`checkpoint`]: binary model snapshots.
//! - [`config`]: `key=value` run configuration.
//! - [`runs`]: train / eval / multi-sample runners writing CSV.
//! - [`toy`]: the 2-D two-cluster diffusion check.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod io;
pub mod runs;
pub mod toy;

pub use config::RunConfig;
pub use error::{FadnError, Result};
