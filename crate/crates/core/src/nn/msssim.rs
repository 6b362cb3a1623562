//! Multi-scale structural similarity.
//!
//! Contrast and structure enter at every scale, luminance only at the
//! coarsest; per-scale maps are averaged spatially, raised to their weight
//! exponents and multiplied. Gaussian windows are applied without padding
//! and scales are linked by 2x2 average pooling. The exponent weights use
//! the standard published values, renormalized when fewer scales are used.

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// The customary 5-scale exponents.
pub const STANDARD_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Debug, Clone)]
pub struct MsSsimConfig {
    pub kernel_size: usize,
    pub sigma: f64,
    pub weights: Vec<f64>,
    pub k1: f64,
    pub k2: f64,
}

impl MsSsimConfig {
    /// `scales` in 1..=5; weights are the first `scales` standard values
    /// renormalized to sum to one.
    pub fn with_scales(scales: usize) -> Self {
        assert!((1..=5).contains(&scales), "supported scale counts are 1..=5");
        let raw = &STANDARD_WEIGHTS[..scales];
        let total: f64 = raw.iter().sum();
        MsSsimConfig {
            kernel_size: 11,
            sigma: 1.5,
            weights: raw.iter().map(|w| w / total).collect(),
            k1: 0.01,
            k2: 0.03,
        }
    }

    pub fn scales(&self) -> usize {
        self.weights.len()
    }

    /// Smallest admissible square side for this configuration.
    pub fn min_side(&self) -> usize {
        self.kernel_size << (self.scales() - 1)
    }

    /// Reject images too small for the configured scale count.
    pub fn validate_side(&self, h: usize, w: usize) -> Result<()> {
        let min = self.min_side();
        if h < min || w < min {
            return Err(CoreError::validation(format!(
                "image {h}x{w} too small for {} scales with kernel {}; need at least {min}x{min} \
                 (reduce the scale count)",
                self.scales(),
                self.kernel_size
            )));
        }
        Ok(())
    }

    fn gaussian_kernel(&self) -> Tensor {
        let k = self.kernel_size;
        let c = (k as f64 - 1.0) / 2.0;
        let mut data = Vec::with_capacity(k * k);
        for y in 0..k {
            for x in 0..k {
                let dy = y as f64 - c;
                let dx = x as f64 - c;
                data.push((-(dx * dx + dy * dy) / (2.0 * self.sigma * self.sigma)).exp());
            }
        }
        let total: f64 = data.iter().sum();
        for v in data.iter_mut() {
            *v /= total;
        }
        Tensor::new(&[1, 1, k, k], data)
    }
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self::with_scales(3)
    }
}

/// Tape graph for the similarity of two (n,1,h,w) image batches, pooled
/// over the batch. Differentiable w.r.t. both inputs.
pub fn msssim_graph(tape: &mut Tape, x: Var, y: Var, cfg: &MsSsimConfig) -> Var {
    let shape = tape.value(x).shape().to_vec();
    assert_eq!(shape, tape.value(y).shape(), "ms-ssim on mismatched shapes");
    assert_eq!(shape.len(), 4, "ms-ssim expects (n,1,h,w)");
    assert_eq!(shape[1], 1, "ms-ssim is single-channel");
    cfg.validate_side(shape[2], shape[3]).expect("image too small for scale count");

    let c1 = (cfg.k1 * 1.0f64).powi(2);
    let c2 = (cfg.k2 * 1.0f64).powi(2);
    let g = tape.constant(cfg.gaussian_kernel());

    let mut xs = x;
    let mut ys = y;
    let mut product: Option<Var> = None;
    let scales = cfg.scales();

    for (j, &weight) in cfg.weights.iter().enumerate() {
        let mu_x = tape.conv2d(xs, g, 1, 0);
        let mu_y = tape.conv2d(ys, g, 1, 0);
        let mu_xx = tape.mul(mu_x, mu_x);
        let mu_yy = tape.mul(mu_y, mu_y);
        let mu_xy = tape.mul(mu_x, mu_y);

        let xx = tape.mul(xs, xs);
        let yy = tape.mul(ys, ys);
        let xy = tape.mul(xs, ys);
        let e_xx = tape.conv2d(xx, g, 1, 0);
        let e_yy = tape.conv2d(yy, g, 1, 0);
        let e_xy = tape.conv2d(xy, g, 1, 0);
        let var_x_raw = tape.sub(e_xx, mu_xx);
        let var_x = tape.clamp_min(var_x_raw, 0.0);
        let var_y_raw = tape.sub(e_yy, mu_yy);
        let var_y = tape.clamp_min(var_y_raw, 0.0);
        let cov = tape.sub(e_xy, mu_xy);

        // cs = (2 cov + C2) / (var_x + var_y + C2)
        let cov2 = tape.mul_scalar(cov, 2.0);
        let num = tape.add_scalar(cov2, c2);
        let var_sum = tape.add(var_x, var_y);
        let den = tape.add_scalar(var_sum, c2);
        let cs_map = tape.div(num, den);
        let cs_mean = tape.mean_all(cs_map);
        let cs_pos = tape.clamp_min(cs_mean, 1e-6);
        let cs_pow = tape.pow_scalar(cs_pos, weight);
        product = Some(match product {
            Some(p) => tape.mul(p, cs_pow),
            None => cs_pow,
        });

        if j + 1 == scales {
            // Luminance at the coarsest scale only.
            let mu_xy2 = tape.mul_scalar(mu_xy, 2.0);
            let l_num = tape.add_scalar(mu_xy2, c1);
            let mu_sq = tape.add(mu_xx, mu_yy);
            let l_den = tape.add_scalar(mu_sq, c1);
            let l_map = tape.div(l_num, l_den);
            let l_mean = tape.mean_all(l_map);
            let l_pos = tape.clamp_min(l_mean, 1e-6);
            let l_pow = tape.pow_scalar(l_pos, weight);
            product = Some(tape.mul(product.unwrap(), l_pow));
        } else {
            xs = tape.avgpool2d(xs, 2);
            ys = tape.avgpool2d(ys, 2);
        }
    }
    product.unwrap()
}

/// Similarity of two single frames, each (h,w) or (1,h,w); plain value in
/// [0,1] (up to clamping slack on pathological inputs).
pub fn ms_ssim(x: &Tensor, y: &Tensor, cfg: &MsSsimConfig) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(CoreError::validation(format!(
            "ms_ssim shape mismatch: {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let (h, w) = match x.shape() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        other => {
            return Err(CoreError::validation(format!("ms_ssim expects a single frame, got {other:?}")))
        }
    };
    cfg.validate_side(h, w)?;
    for t in [x, y] {
        if t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(CoreError::validation("ms_ssim inputs must lie in [0,1]".to_string()));
        }
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone().reshape(&[1, 1, h, w]));
    let yv = tape.constant(y.clone().reshape(&[1, 1, h, w]));
    let out = msssim_graph(&mut tape, xv, yv, cfg);
    Ok(tape.value(out).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_frame(seed: u64, h: usize, w: usize) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::new(&[h, w], (0..h * w).map(|_| rng::uniform(&mut r, 0.0, 1.0)).collect())
    }

    #[test]
    fn self_similarity_is_one() {
        let x = random_frame(10, 64, 64);
        let cfg = MsSsimConfig::with_scales(3);
        let v = ms_ssim(&x, &x, &cfg).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "got {v}");
    }

    #[test]
    fn symmetric() {
        let x = random_frame(11, 64, 64);
        let y = random_frame(12, 64, 64);
        let cfg = MsSsimConfig::with_scales(3);
        let a = ms_ssim(&x, &y, &cfg).unwrap();
        let b = ms_ssim(&y, &x, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn in_unit_interval_over_random_pairs() {
        let cfg = MsSsimConfig::with_scales(2);
        for seed in 0..50 {
            let x = random_frame(100 + seed, 32, 32);
            let y = random_frame(200 + seed, 32, 32);
            let v = ms_ssim(&x, &y, &cfg).unwrap();
            assert!((0.0..=1.0).contains(&v), "out of range: {v}");
        }
    }

    #[test]
    fn too_small_rejected_with_hint() {
        let x = random_frame(1, 16, 16);
        let cfg = MsSsimConfig::with_scales(3);
        let err = ms_ssim(&x, &x, &cfg).unwrap_err();
        assert!(err.to_string().contains("reduce the scale count"));
    }

    #[test]
    fn range_validated() {
        let mut x = random_frame(2, 16, 16);
        x.data_mut()[0] = 1.5;
        let cfg = MsSsimConfig::with_scales(1);
        assert!(ms_ssim(&x, &x, &cfg).is_err());
    }
}
