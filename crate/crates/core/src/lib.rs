//! Numerics for semiclassical scattering through a hyperbolic fixed point.

pub mod asymptotics;
pub mod error;
pub mod flow;
pub mod io;
pub mod microlocal;
pub mod model;
pub mod ode;
pub mod oracle;
pub mod phase;
pub mod poly;
pub mod transition;
pub mod special;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/models.md")]
    pub struct Models;
    #[doc = include_str!("../../../book/src/manifolds.md")]
    pub struct Manifolds;
    #[doc = include_str!("../../../book/src/expansions.md")]
    pub struct Expansions;
    #[doc = include_str!("../../../book/src/phase.md")]
    pub struct Phase;
    #[doc = include_str!("../../../book/src/transition.md")]
    pub struct Transition;
    #[doc = include_str!("../../../book/src/microlocal.md")]
    pub struct Microlocal;
    #[doc = include_str!("../../../book/src/oracle.md")]
    pub struct Oracle;
}
