//! Optimization-based parametric reduced-order modeling for linear
//! time-invariant systems.
//!
//! The library computes locally H2⊗L2-optimal parametric reduced-order
//! models by gradient-based optimization of the reduced-order matrices,
//! with stability preserved across the whole parameter domain. It ships
//! the supporting machinery this needs: parameter-separable system
//! representations ([`psys`]), dense Lyapunov/Sylvester solvers
//! ([`mateq`]), adaptive quadrature over parameter boxes ([`quad`]),
//! certified stability checks ([`stability`]), Gramian-based norms and
//! objectives ([`gramians`]), analytic gradients ([`grad`]), a BFGS
//! driver with stability gating ([`optim`]), IRKA-based initialization
//! ([`init`]), and benchmark model generators ([`bench`]).

pub mod bench;
pub mod cli;
pub mod grad;
pub mod gramians;
pub mod init;
pub mod mateq;
pub mod optim;
pub mod psys;
pub mod quad;
pub mod stability;

#[doc(hidden)]
pub mod testutil;
