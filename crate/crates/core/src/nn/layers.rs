//! Layer structs: thin wrappers that own parameter refs and know how to
//! apply themselves on a session tape.

use crate::autodiff::Var;
use crate::rng::DetRng;
use crate::tensor::Tensor;

use super::params::{ParamRef, ParamSet, Session};

fn uniform_tensor(rng: &mut DetRng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| crate::rng::uniform(rng, -bound, bound)).collect();
    Tensor::new(shape, data)
}

/// Kaiming-style uniform init over fan-in.
pub fn linear_init(rng: &mut DetRng, shape: &[usize], fan_in: usize) -> Tensor {
    uniform_tensor(rng, shape, (1.0 / fan_in as f64).sqrt())
}

/// Fully connected layer; weights stored (in, out).
pub struct Linear {
    pub w: ParamRef,
    pub b: Option<ParamRef>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, rng: &mut DetRng, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let w = ps.add(format!("{name}.w"), linear_init(rng, &[in_dim, out_dim], in_dim));
        let b = bias.then(|| ps.add(format!("{name}.b"), linear_init(rng, &[out_dim], in_dim)));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.p(self.w);
        let y = s.tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = s.p(b);
                s.tape.add_row_bias(y, b)
            }
            None => y,
        }
    }
}

/// 2-D convolution; weights (c_out, c_in, k, k).
pub struct Conv2d {
    pub w: ParamRef,
    pub b: Option<ParamRef>,
    pub stride: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut DetRng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = c_in * k * k;
        let w = ps.add(format!("{name}.w"), linear_init(rng, &[c_out, c_in, k, k], fan_in));
        let b = bias.then(|| ps.add(format!("{name}.b"), linear_init(rng, &[c_out], fan_in)));
        Conv2d { w, b, stride, pad, c_in, c_out, k }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.p(self.w);
        let y = s.tape.conv2d(x, w, self.stride, self.pad);
        match self.b {
            Some(b) => {
                let b = s.p(b);
                s.tape.add_chan_bias(y, b)
            }
            None => y,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

/// Transposed 2-D convolution; weights (c_in, c_out, k, k).
pub struct ConvT2d {
    pub w: ParamRef,
    pub b: Option<ParamRef>,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl ConvT2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        rng: &mut DetRng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = c_in * k * k;
        let w = ps.add(format!("{name}.w"), linear_init(rng, &[c_in, c_out, k, k], fan_in));
        let b = bias.then(|| ps.add(format!("{name}.b"), linear_init(rng, &[c_out], fan_in)));
        ConvT2d { w, b, stride, pad, out_pad, c_in, c_out, k }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.p(self.w);
        let y = s.tape.convt2d(x, w, self.stride, self.pad, self.out_pad);
        match self.b {
            Some(b) => {
                let b = s.p(b);
                s.tape.add_chan_bias(y, b)
            }
            None => y,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.k + self.out_pad - 2 * self.pad,
            (w - 1) * self.stride + self.k + self.out_pad - 2 * self.pad,
        )
    }
}

/// Batch normalization with running statistics kept as buffers.
///
/// Training sessions use batch statistics and fold the batch moments into
/// the running buffers (momentum 0.1, biased variance); eval sessions use
/// the stored statistics.
pub struct BatchNorm2d {
    pub gamma: ParamRef,
    pub beta: ParamRef,
    pub running_mean: ParamRef,
    pub running_var: ParamRef,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        let running_mean = ps.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var = ps.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0));
        BatchNorm2d { gamma, beta, running_mean, running_var, channels, eps: 1e-5, momentum: 0.1 }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        if s.is_train() {
            let shape = s.tape.value(x).shape();
            let m = shape[0] * shape[2] * shape[3];
            // A single normalization element makes the layer a constant
            // function of its input (zero gradient everywhere).
            assert!(m >= 2, "batch norm over {m} element(s); increase batch or spatial size");
            let gamma = s.p(self.gamma);
            let beta = s.p(self.beta);
            let (y, mean, var) = s.tape.batch_norm_train(x, gamma, beta, self.eps);
            let rm = s.raw(self.running_mean).data().to_vec();
            let rv = s.raw(self.running_var).data().to_vec();
            let new_rm: Vec<f64> = rm
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| (1.0 - self.momentum) * r + self.momentum * b)
                .collect();
            let new_rv: Vec<f64> = rv
                .iter()
                .zip(&var)
                .map(|(&r, &b)| (1.0 - self.momentum) * r + self.momentum * b)
                .collect();
            s.update_buffer(self.running_mean, Tensor::new(&[self.channels], new_rm));
            s.update_buffer(self.running_var, Tensor::new(&[self.channels], new_rv));
            y
        } else {
            let gamma = s.raw(self.gamma).data().to_vec();
            let beta = s.raw(self.beta).data().to_vec();
            let rm = s.raw(self.running_mean).data().to_vec();
            let rv = s.raw(self.running_var).data().to_vec();
            s.tape.batch_norm_eval(x, &gamma, &beta, &rm, &rv, self.eps)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn linear_shapes() {
        let mut ps = ParamSet::new();
        let mut r = rng::seeded(1);
        let lin = Linear::new(&mut ps, &mut r, "fc", 4, 3, true);
        let mut s = Session::eval(&mut ps);
        let x = s.input(Tensor::zeros(&[2, 4]));
        let y = lin.forward(&mut s, x);
        assert_eq!(s.tape.value(y).shape(), &[2, 3]);
    }

    #[test]
    fn zero_weight_linear_maps_to_bias() {
        let mut ps = ParamSet::new();
        let mut r = rng::seeded(1);
        let lin = Linear::new(&mut ps, &mut r, "fc", 2, 2, true);
        ps.set(lin.w, Tensor::zeros(&[2, 2]));
        ps.set(lin.b.unwrap(), Tensor::new(&[2], vec![0.5, -0.5]));
        let mut s = Session::eval(&mut ps);
        let x = s.input(Tensor::new(&[1, 2], vec![3.0, 4.0]));
        let y = lin.forward(&mut s, x);
        assert_eq!(s.tape.value(y).data(), &[0.5, -0.5]);
    }

    #[test]
    fn batchnorm_train_updates_running_stats() {
        let mut ps = ParamSet::new();
        let bn = BatchNorm2d::new(&mut ps, "bn", 1);
        {
            let mut s = Session::train(&mut ps);
            let x = s.input(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
            let _ = bn.forward(&mut s, x);
        }
        let rm = ps.get(bn.running_mean).data()[0];
        // 0.9 * 0 + 0.1 * 2.5
        assert!((rm - 0.25).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut ps = ParamSet::new();
        let bn = BatchNorm2d::new(&mut ps, "bn", 1);
        ps.set(bn.running_mean, Tensor::new(&[1], vec![2.0]));
        ps.set(bn.running_var, Tensor::new(&[1], vec![4.0]));
        let mut s = Session::eval(&mut ps);
        let x = s.input(Tensor::new(&[1, 1, 1, 2], vec![2.0, 4.0]));
        let y = bn.forward(&mut s, x);
        let out = s.tape.value(y).data().to_vec();
        assert!((out[0] - 0.0).abs() < 1e-6);
        assert!((out[1] - 1.0).abs() < 1e-3); // 2 / sqrt(4 + eps)
    }
}
