//! Rate-induced tipping from periodic attractors in parameter-shift systems.
//!
//! The crate studies the parameter-shifted Bautin normal form
//! `ż = F(z − Λ(rt))` and provides
//!
//! * [`classify`]: ensemble shooting that labels `(a, r)` points as tracking,
//!   partial or total tipping and reconstructs `W^s(Z₊)`;
//! * [`frozen`]: frozen-system orbits, equilibria and Floquet data;
//! * [`lin`]: Lin's-method computation of periodic-to-periodic and
//!   periodic-to-equilibrium connections, whose zero sets give the critical
//!   rates `r₀`, `r₁`, `r₂`;
//! * [`bvp`]: the multiple-shooting boundary-value engine behind them.

pub mod bvp;
pub mod classify;
pub mod cli;
pub mod frozen;
pub mod integrator;
pub mod lin;
pub mod model;

pub use model::{ExtendedState, SystemParams};
