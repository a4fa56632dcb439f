//! Stand-alone checkers and stability sweeps.

pub mod chain;
pub mod identities;
pub mod modulus;
pub mod sweep;

pub use chain::{chain_constants, check_elliptic_chain, compare_chain, ChainConstants};
pub use identities::{check_lemte, check_ui0};
pub use modulus::{fit_modulus, Modulus, ModulusFit};
pub use sweep::{sweep_stability, Family, FamilyKind, SweepResult, SweepRow, SweepTolerances, Which};
