//! Weak KAM, Aubry–Mather and transport computations for monotone
//! configurations of interacting particles on the circle.

pub mod action;
pub mod aubry;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod io;
pub mod kam;
pub mod kernel;
mod linalg;
pub mod mather;
pub mod model;
pub mod run;
pub mod scenario;
pub mod torus;
pub mod transport;
pub mod weakkam;

pub use error::{Error, Result};

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/configurations.md")]
    pub mod configurations {}
    #[doc = include_str!("../../../book/src/model.md")]
    pub mod model {}
    #[doc = include_str!("../../../book/src/action.md")]
    pub mod action {}
    #[doc = include_str!("../../../book/src/weak-kam.md")]
    pub mod weak_kam {}
    #[doc = include_str!("../../../book/src/mather.md")]
    pub mod mather {}
    #[doc = include_str!("../../../book/src/aubry.md")]
    pub mod aubry {}
    #[doc = include_str!("../../../book/src/transport.md")]
    pub mod transport {}
    #[doc = include_str!("../../../book/src/kam.md")]
    pub mod kam {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
    #[doc = include_str!("../../../book/src/verification.md")]
    pub mod verification {}
}
