//! Convolutional encoder/decoder shared by the world-model and the
//! direct-perception networks.
//!
//! The channel ladder is anchored at its deep end: the stage before the
//! latent always carries 64 channels at 4x4, each earlier stage halves the
//! channel count, and the stage count follows the resolution
//! (log2(side) - 2). At 256x256 that yields stages 2,4,8,16,32,64 with a
//! final 3x3/stride-2 convolution to a 128x1x1 latent; smaller inputs keep
//! the deep tail of the same ladder.

use crate::autodiff::Var;
use crate::nn::{Conv2d, ConvT2d, ParamSet, Session};
use crate::rng::DetRng;

/// Geometry of one autoencoder instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AutoencSpec {
    pub side: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub latent_dim: usize,
}

impl AutoencSpec {
    pub fn stage_count(&self) -> usize {
        assert!(self.side.is_power_of_two() && self.side >= 16, "side must be a power of two >= 16");
        (self.side.trailing_zeros() as usize) - 2
    }

    /// Encoder stage output channels, shallow to deep (ends at 64).
    pub fn encoder_channels(&self) -> Vec<usize> {
        let s = self.stage_count();
        (0..s).map(|i| 64 >> (s - 1 - i)).collect()
    }

    /// Decoder stage output channels, deep to shallow (starts at 64).
    pub fn decoder_channels(&self) -> Vec<usize> {
        let mut c = self.encoder_channels();
        c.reverse();
        c
    }

    /// (layer label, output shape) trace of the encoder, no parameters
    /// allocated.
    pub fn encoder_shape_trace(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![("input".to_string(), vec![self.in_channels, self.side, self.side])];
        let mut side = self.side;
        for c in self.encoder_channels() {
            side /= 2;
            out.push((format!("conv3-{c} x2"), vec![c, side, side]));
        }
        out.push((format!("conv3-{}", self.latent_dim), vec![self.latent_dim, 1, 1]));
        out
    }

    pub fn decoder_shape_trace(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![("input".to_string(), vec![1, self.latent_dim])];
        let mut side = 1;
        for (i, c) in self.decoder_channels().into_iter().enumerate() {
            // The first stage doubles twice (1 -> 4), later stages once.
            side *= if i == 0 { 4 } else { 2 };
            out.push((format!("tconv3-{c} x2"), vec![c, side, side]));
        }
        out.push((format!("tconv3-{}", self.out_channels), vec![self.out_channels, self.side, self.side]));
        out
    }
}

pub struct Encoder {
    pub spec: AutoencSpec,
    stages: Vec<(Conv2d, Conv2d)>,
    final_conv: Conv2d,
    /// Bound latents in (-1,1) so they live in the recurrent cell's state
    /// space.
    pub tanh_latent: bool,
}

impl Encoder {
    pub fn new(ps: &mut ParamSet, rng: &mut DetRng, name: &str, spec: AutoencSpec) -> Self {
        let mut stages = Vec::new();
        let mut c_in = spec.in_channels;
        for (i, c) in spec.encoder_channels().into_iter().enumerate() {
            let a = Conv2d::new(ps, rng, &format!("{name}.s{i}a"), c_in, c, 3, 2, 1, true);
            let b = Conv2d::new(ps, rng, &format!("{name}.s{i}b"), c, c, 3, 1, 1, true);
            stages.push((a, b));
            c_in = c;
        }
        let final_conv =
            Conv2d::new(ps, rng, &format!("{name}.latent"), c_in, spec.latent_dim, 3, 2, 0, true);
        Encoder { spec, stages, final_conv, tanh_latent: true }
    }

    /// (batch, in_channels, side, side) -> (batch, latent_dim).
    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let mut h = x;
        for (a, b) in &self.stages {
            h = a.forward(s, h);
            h = s.tape.relu(h);
            h = b.forward(s, h);
            h = s.tape.relu(h);
        }
        let lat = self.final_conv.forward(s, h);
        let b = s.tape.value(lat).shape()[0];
        let d = self.spec.latent_dim;
        let flat = s.tape.reshape(lat, &[b, d]);
        if self.tanh_latent {
            s.tape.tanh(flat)
        } else {
            flat
        }
    }
}

pub struct Decoder {
    pub spec: AutoencSpec,
    stages: Vec<(ConvT2d, ConvT2d)>,
    final_tconv: ConvT2d,
    /// Sigmoid on the output (pixel decoders); raw logits otherwise
    /// (segmentation heads).
    pub sigmoid_out: bool,
}

impl Decoder {
    pub fn new(ps: &mut ParamSet, rng: &mut DetRng, name: &str, spec: AutoencSpec) -> Self {
        let chans = spec.decoder_channels();
        let mut stages = Vec::new();
        let mut c_in = spec.latent_dim;
        for (i, c) in chans.iter().copied().enumerate() {
            // First stage doubles twice (1 -> 4); later stages double once
            // then refine.
            let (sa, sb) = if i == 0 { (2, 2) } else { (2, 1) };
            let a = ConvT2d::new(ps, rng, &format!("{name}.s{i}a"), c_in, c, 3, sa, 1, 1, true);
            let b = ConvT2d::new(
                ps,
                rng,
                &format!("{name}.s{i}b"),
                c,
                c,
                3,
                sb,
                1,
                if sb == 2 { 1 } else { 0 },
                true,
            );
            stages.push((a, b));
            c_in = c;
        }
        let final_tconv =
            ConvT2d::new(ps, rng, &format!("{name}.out"), c_in, spec.out_channels, 3, 2, 1, 1, true);
        Decoder { spec, stages, final_tconv, sigmoid_out: true }
    }

    /// (batch, latent_dim) -> (batch, out_channels, side, side).
    pub fn forward(&self, s: &mut Session, latent: Var) -> Var {
        let b = s.tape.value(latent).shape()[0];
        let mut h = s.tape.reshape(latent, &[b, self.spec.latent_dim, 1, 1]);
        for (a, bl) in &self.stages {
            h = a.forward(s, h);
            h = s.tape.relu(h);
            h = bl.forward(s, h);
            h = s.tape.relu(h);
        }
        let out = self.final_tconv.forward(s, h);
        if self.sigmoid_out {
            s.tape.sigmoid(out)
        } else {
            out
        }
    }
}
