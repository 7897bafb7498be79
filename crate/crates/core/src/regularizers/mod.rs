//! Proximity operators and the linear operators inside the dual updates.

pub mod patch;
pub mod prox;
pub mod rotate;

pub use patch::{PatchExtractor, PatchSettings};
pub use prox::{moreau_residual, prox_l1, prox_nonneg, prox_tnn, svt, tnn, TnnProx};
pub use rotate::{rotate45, rotate45_adjoint, Rotation45};
