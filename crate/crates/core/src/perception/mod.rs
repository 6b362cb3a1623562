//! The three perception networks and their shared encoder/decoder.

mod autoenc;
mod brn;
mod dpn;
mod mpn;

pub use autoenc::{AutoencSpec, Decoder, Encoder};
pub use brn::{Brn, BrnConfig};
pub use dpn::{evaluate_dpn, train_dpn, Dpn, DpnConfig, DpnEval, DpnOutputs};
pub use mpn::{train_mpn, Mpn, MpnConfig};

/// Optimization settings shared by the offline trainers.
#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts { steps: 400, batch: 8, lr: 1e-3, seed: 0 }
    }
}
