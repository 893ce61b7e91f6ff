//! Energy-based models trained by diffusion contrastive divergence under a
//! variance-exploding diffusion, with contrastive-divergence baselines and
//! numerical checks of the underlying divergence identities.

pub mod datasets;
pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod model;
pub mod objectives;
pub mod oracles;
pub mod sampler;

pub use dcd_autodiff::Tensor;
pub use error::{CoreError, Result};
