//! Fixed-order output-feedback controller synthesis for linear time-invariant
//! plants.
//!
//! Controllers of prescribed order (including static gains) are tuned by
//! nonsmooth local optimization of closed-loop H2 and H-infinity norms. Mixed
//! designs, where some norms are minimized while others are bounded, are
//! handled by an exact penalty. The pipeline is:
//!
//! * [`plant`]: the nine-block plant model and its JSON problem format;
//! * [`closedloop`]: controller parameterization, closed-loop assembly and the
//!   zero-feedthrough elimination required by the H2 norm;
//! * [`objectives`]: spectral abscissa, H2 and H-infinity evaluations with
//!   gradients in the free parameters;
//! * [`optimizer`]: BFGS with a weak Wolfe line search, gradient sampling and
//!   multi-start;
//! * [`synthesis`]: the phased driver (stabilize, reach feasibility, minimize);
//! * [`cli`]: the `synth` command-line front end.

pub mod cli;
pub mod closedloop;
pub mod error;
pub mod numerics;
pub mod objectives;
pub mod optimizer;
pub mod plant;
pub mod synthesis;

pub use error::{Error, Result};
pub use numerics::Matrix;
