//! Semiclassical machinery of the Dirac equation: relativistic classical
//! flows, SU(2) spin transport with dynamical and geometric phases, the
//! leading-order propagator, periodic orbits and the spin-weighted trace
//! formula.

pub mod dynamics;
pub mod fields;
pub mod ode;
pub mod orbits;
pub mod propagator;
pub mod spin;
pub mod trace;
