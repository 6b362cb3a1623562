//! Neural-network building blocks on top of the autodiff tape: parameter
//! storage, layers, the gated recurrent cell, the Adam optimizer and the
//! multi-scale structural-similarity objective.

mod gru;
mod layers;
mod msssim;
mod optim;
mod params;

pub use gru::GruCell;
pub use layers::{linear_init, BatchNorm2d, Conv2d, ConvT2d, Linear};
pub use msssim::{ms_ssim, msssim_graph, MsSsimConfig};
pub use optim::Adam;
pub use params::{ParamRef, ParamSet, Session};
