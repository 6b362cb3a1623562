//! Behavior-reflex network: residual image encoder compressing a 3-frame
//! stack into one embedding. The only perception network trained jointly
//! with the action head.
//!
//! Structure: 7x7 stride-2 stem, 3x3 max pool, four residual blocks (two
//! 3x3 convolutions with batch norm each, projection shortcut, 4x channel
//! expansion), adaptive average pool, fully connected to the embedding.

use crate::autodiff::Var;
use crate::nn::{BatchNorm2d, Conv2d, Linear, ParamSet, Session};
use crate::rng::DetRng;

#[derive(Debug, Clone, PartialEq)]
pub struct BrnConfig {
    pub frame_side: usize,
    pub stack_depth: usize,
    /// Stem width; block widths double per block and blocks emit 4x their
    /// width (the published structure uses 64).
    pub base_width: usize,
    pub embed_dim: usize,
}

impl Default for BrnConfig {
    fn default() -> Self {
        BrnConfig { frame_side: 64, stack_depth: 3, base_width: 8, embed_dim: 128 }
    }
}

impl BrnConfig {
    /// Published full-scale configuration (256x256 inputs, width 64).
    pub fn paper_scale() -> Self {
        BrnConfig { frame_side: 256, stack_depth: 3, base_width: 64, embed_dim: 128 }
    }

    /// (layer name, output shape) trace without allocating parameters.
    pub fn shape_trace(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.base_width;
        let mut side = self.frame_side;
        let mut out = Vec::new();
        side /= 2;
        out.push(("conv1".to_string(), vec![w, side, side]));
        side /= 2;
        out.push(("pool1".to_string(), vec![w, side, side]));
        let mut chans = w;
        for b in 0..4 {
            let width = w << b;
            if b > 0 {
                side /= 2;
            }
            chans = width * 4;
            out.push((format!("block{}", b + 1), vec![chans, side, side]));
        }
        out.push(("pool2".to_string(), vec![chans, 1, 1]));
        out.push(("fully connected".to_string(), vec![self.embed_dim, 1]));
        out
    }

    pub fn to_meta(&self) -> Vec<(String, String)> {
        vec![
            ("brn_frame_side".into(), self.frame_side.to_string()),
            ("brn_stack_depth".into(), self.stack_depth.to_string()),
            ("brn_base_width".into(), self.base_width.to_string()),
            ("brn_embed_dim".into(), self.embed_dim.to_string()),
        ]
    }
}

/// Two 3x3 convolutions with batch norm and a projected shortcut.
pub(crate) struct ResidualBlock {
    pub conv1: Conv2d,
    bn1: BatchNorm2d,
    pub conv2: Conv2d,
    bn2: BatchNorm2d,
    proj: Conv2d,
    bn_proj: BatchNorm2d,
}

impl ResidualBlock {
    fn new(
        ps: &mut ParamSet,
        rng: &mut DetRng,
        name: &str,
        c_in: usize,
        width: usize,
        stride: usize,
    ) -> Self {
        let c_out = width * 4;
        ResidualBlock {
            conv1: Conv2d::new(ps, rng, &format!("{name}.conv1"), c_in, width, 3, stride, 1, false),
            bn1: BatchNorm2d::new(ps, &format!("{name}.bn1"), width),
            conv2: Conv2d::new(ps, rng, &format!("{name}.conv2"), width, c_out, 3, 1, 1, false),
            bn2: BatchNorm2d::new(ps, &format!("{name}.bn2"), c_out),
            proj: Conv2d::new(ps, rng, &format!("{name}.proj"), c_in, c_out, 1, stride, 0, false),
            bn_proj: BatchNorm2d::new(ps, &format!("{name}.bn_proj"), c_out),
        }
    }

    pub(crate) fn forward(&self, s: &mut Session, x: Var) -> Var {
        let main = self.conv1.forward(s, x);
        let main = self.bn1.forward(s, main);
        let main = s.tape.relu(main);
        let main = self.conv2.forward(s, main);
        let main = self.bn2.forward(s, main);
        let skip = self.shortcut(s, x);
        let sum = s.tape.add(main, skip);
        s.tape.relu(sum)
    }

    /// Projected input path alone (the skip branch).
    pub(crate) fn shortcut(&self, s: &mut Session, x: Var) -> Var {
        let skip = self.proj.forward(s, x);
        self.bn_proj.forward(s, skip)
    }
}

pub struct Brn {
    pub cfg: BrnConfig,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    blocks: Vec<ResidualBlock>,
    fc: Linear,
}

impl Brn {
    /// Registers parameters into the caller's set (the behavior-reflex
    /// weights live inside the agent checkpoint, not a standalone one).
    pub fn new(ps: &mut ParamSet, rng: &mut DetRng, cfg: BrnConfig) -> Self {
        let w = cfg.base_width;
        let conv1 = Conv2d::new(ps, rng, "brn.conv1", cfg.stack_depth, w, 7, 2, 3, false);
        let bn1 = BatchNorm2d::new(ps, "brn.bn1", w);
        let mut blocks = Vec::with_capacity(4);
        let mut c_in = w;
        for b in 0..4 {
            let width = w << b;
            let stride = if b == 0 { 1 } else { 2 };
            blocks.push(ResidualBlock::new(ps, rng, &format!("brn.block{}", b + 1), c_in, width, stride));
            c_in = width * 4;
        }
        let fc = Linear::new(ps, rng, "brn.fc", c_in, cfg.embed_dim, true);
        Brn { cfg, conv1, bn1, blocks, fc }
    }

    /// (batch, stack_depth, side, side) -> (batch, embed_dim).
    pub fn embed(&self, s: &mut Session, stack: Var) -> Var {
        let shape = s.tape.value(stack).shape().to_vec();
        assert_eq!(
            shape[1], self.cfg.stack_depth,
            "stack depth {} does not match config {}",
            shape[1], self.cfg.stack_depth
        );
        let h = self.conv1.forward(s, stack);
        let h = self.bn1.forward(s, h);
        let h = s.tape.relu(h);
        let mut h = s.tape.maxpool2d(h, 3, 2, 1);
        for b in &self.blocks {
            h = b.forward(s, h);
        }
        let pooled = s.tape.mean_hw(h);
        self.fc.forward(s, pooled)
    }

    #[cfg(test)]
    pub(crate) fn block(&self, i: usize) -> &ResidualBlock {
        &self.blocks[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::Tensor;

    #[test]
    fn paper_scale_trace_matches_published_table() {
        let trace = BrnConfig::paper_scale().shape_trace();
        let expected: Vec<(&str, Vec<usize>)> = vec![
            ("conv1", vec![64, 128, 128]),
            ("pool1", vec![64, 64, 64]),
            ("block1", vec![256, 64, 64]),
            ("block2", vec![512, 32, 32]),
            ("block3", vec![1024, 16, 16]),
            ("block4", vec![2048, 8, 8]),
            ("pool2", vec![2048, 1, 1]),
            ("fully connected", vec![128, 1]),
        ];
        assert_eq!(trace.len(), expected.len());
        for ((name, shape), (ename, eshape)) in trace.iter().zip(&expected) {
            assert_eq!(name, ename);
            assert_eq!(shape, eshape, "layer {name}");
        }
    }

    #[test]
    fn toy_embed_is_128_and_finite() {
        let cfg = BrnConfig { frame_side: 32, base_width: 4, ..Default::default() };
        let mut ps = ParamSet::new();
        let mut r = rng::seeded(1);
        let brn = Brn::new(&mut ps, &mut r, cfg);
        let mut s = Session::eval(&mut ps);
        let x = s.input(Tensor::new(
            &[2, 3, 32, 32],
            (0..2 * 3 * 1024).map(|i| ((i % 97) as f64) / 97.0).collect(),
        ));
        let e = brn.embed(&mut s, x);
        assert_eq!(s.tape.value(e).shape(), &[2, 128]);
        assert!(s.tape.value(e).all_finite());
    }

    #[test]
    fn zero_final_fc_zero_embedding() {
        let cfg = BrnConfig { frame_side: 32, base_width: 4, ..Default::default() };
        let mut ps = ParamSet::new();
        let mut r = rng::seeded(2);
        let brn = Brn::new(&mut ps, &mut r, cfg);
        let wshape = ps.get(brn.fc.w).shape().to_vec();
        ps.set(brn.fc.w, Tensor::zeros(&wshape));
        let bref = brn.fc.b.unwrap();
        let bshape = ps.get(bref).shape().to_vec();
        ps.set(bref, Tensor::zeros(&bshape));
        let mut s = Session::eval(&mut ps);
        let x = s.input(Tensor::zeros(&[1, 3, 32, 32]));
        let e = brn.embed(&mut s, x);
        assert!(s.tape.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_second_conv_leaves_projected_input_path() {
        let cfg = BrnConfig { frame_side: 32, base_width: 4, ..Default::default() };
        let mut ps = ParamSet::new();
        let mut r = rng::seeded(3);
        let brn = Brn::new(&mut ps, &mut r, cfg);
        // Zero the residual branch's second conv in block 0.
        let w2 = brn.block(0).conv2.w;
        let shape = ps.get(w2).shape().to_vec();
        ps.set(w2, Tensor::zeros(&shape));

        let x0 = Tensor::new(&[1, 4, 8, 8], (0..256).map(|i| (i as f64 * 0.11).sin()).collect());
        let mut s = Session::eval(&mut ps);
        let x = s.input(x0);
        let full = brn.block(0).forward(&mut s, x);
        let skip = brn.block(0).shortcut(&mut s, x);
        let skip_relu = s.tape.relu(skip);
        let a = s.tape.value(full).data();
        let b = s.tape.value(skip_relu).data();
        for (x, y) in a.iter().zip(b) {
            // bn2 of an all-zero map is exactly beta = 0 in eval mode with
            // zero running mean.
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn every_input_frame_influences_embedding() {
        // 64x64 keeps the deepest maps at 2x2, so batch statistics stay
        // non-degenerate even at batch 1.
        let cfg = BrnConfig { frame_side: 64, base_width: 4, ..Default::default() };
        let mut ps = ParamSet::new();
        let mut r = rng::seeded(4);
        let brn = Brn::new(&mut ps, &mut r, cfg);
        let mut s = Session::train(&mut ps);
        let x0 = Tensor::new(
            &[1, 3, 64, 64],
            (0..3 * 4096).map(|i| ((i % 53) as f64) / 53.0).collect(),
        );
        let x = s.tape.param(x0);
        let e = brn.embed(&mut s, x);
        let sq = s.tape.mul(e, e);
        let loss = s.tape.sum_all(sq);
        let grads = s.tape.backward(loss);
        let gx = grads.get(x).expect("input gradient").clone();
        let hw = 4096;
        for frame in 0..3 {
            let norm: f64 =
                gx.data()[frame * hw..(frame + 1) * hw].iter().map(|v| v * v).sum::<f64>();
            assert!(norm > 0.0, "frame {frame} received zero gradient");
        }
    }
}
