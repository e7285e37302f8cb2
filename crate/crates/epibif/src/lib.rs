//! Numerical continuation and bifurcation analysis for an SIR-type epidemic
//! model with saturated incidence and saturated treatment.
//!
//! The toolkit locates and traces equilibria, limit cycles, and
//! codimension-1/2 bifurcations of the model in the (gamma, rho) parameter
//! plane: fold and Hopf curves, Bogdanov-Takens and generalised Hopf points,
//! saddle-node-of-cycles and homoclinic approximations, plus orbit
//! classification and phase portraits. Results serialize to CSV/JSON and
//! render to SVG through the [`cli`] module; `examples/` shows one runnable
//! program per capability.

pub mod cli;
pub mod codim2;
pub mod contin;
pub mod cycles;
pub mod error;
pub mod model;
pub mod numerics;
pub mod odeflow;

pub use error::{Error, Result};
pub use model::{ActiveParam, EquilibriumLabel, EquilibriumPoint, Params, Stability};
