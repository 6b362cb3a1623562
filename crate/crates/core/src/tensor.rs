//! Dense row-major `f64` tensors and the compute kernels behind the
//! autodiff tape.
//!
//! Kernels come in sequential and data-parallel flavors. The parallel
//! versions split work over *disjoint output regions only*, so results are
//! bitwise identical to the sequential path regardless of thread count.

use std::fmt;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Dense tensor: shape plus row-major data.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Self { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape,
            shape
        );
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Binary elementwise combine; shapes must match exactly.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise op on mismatched shapes");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Self { shape: self.shape.clone(), data }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

// ---------------------------------------------------------------------------
// Kernel metadata
// ---------------------------------------------------------------------------

/// Geometry of a 2-D convolution (shared by forward and both gradients).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvMeta {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    /// Extra rows/cols appended to transposed-convolution output.
    pub out_pad: usize,
}

impl ConvMeta {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
    /// Output height of the transposed convolution with this geometry.
    pub fn tout_h(&self) -> usize {
        (self.h - 1) * self.stride + self.kh + self.out_pad - 2 * self.pad
    }
    pub fn tout_w(&self) -> usize {
        (self.w - 1) * self.stride + self.kw + self.out_pad - 2 * self.pad
    }
}

/// Pooling geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolMeta {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolMeta {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }
}

// ---------------------------------------------------------------------------
// Parallel dispatch
// ---------------------------------------------------------------------------

/// Run `body(chunk_index, chunk)` over equal-size chunks of `out`.
///
/// Each chunk is owned by exactly one invocation, so the parallel path
/// computes bit-identical results to the sequential one.
fn for_each_chunk(out: &mut [f64], chunk: usize, body: impl Fn(usize, &mut [f64]) + Sync + Send) {
    debug_assert!(chunk > 0 && out.len() % chunk == 0);
    #[cfg(feature = "parallel")]
    {
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| body(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| body(i, c));
    }
}

/// Sequential twin of [`for_each_chunk`], kept callable with the parallel
/// feature enabled so benchmarks can compare both paths.
pub fn for_each_chunk_seq(out: &mut [f64], chunk: usize, body: impl Fn(usize, &mut [f64])) {
    debug_assert!(chunk > 0 && out.len() % chunk == 0);
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| body(i, c));
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

fn matmul_row(row: usize, a: &[f64], b: &[f64], k: usize, n: usize, out_row: &mut [f64]) {
    let a_row = &a[row * k..(row + 1) * k];
    out_row.fill(0.0);
    for (ai, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
        if *ai == 0.0 {
            continue;
        }
        for (o, bv) in out_row.iter_mut().zip(b_row) {
            *o += ai * bv;
        }
    }
}

/// `a` is (m,k), `b` is (k,n); returns (m,n).
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for_each_chunk(&mut out, n, |row, out_row| matmul_row(row, a, b, k, n, out_row));
    out
}

pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for_each_chunk_seq(&mut out, n, |row, out_row| matmul_row(row, a, b, k, n, out_row));
    out
}

/// `a` (m,k) with `a` transposed in the product: returns aᵀ·b = (k_a_cols? )
/// Concretely: a is (m,k), b is (m,n), result is (k,n).
pub fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for_each_chunk(&mut out, n, |kk, out_row| {
        out_row.fill(0.0);
        for row in 0..m {
            let av = a[row * k + kk];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[row * n..(row + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
    out
}

/// a (m,k), b transposed in the product: a·bᵀ where b is (n,k); result (m,n).
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for_each_chunk(&mut out, n, |row, out_row| {
        let a_row = &a[row * k..(row + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    });
    out
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

fn conv2d_one_map(x: &[f64], w: &[f64], m: &ConvMeta, n: usize, oc: usize, out_map: &mut [f64]) {
    let (oh, ow) = (m.out_h(), m.out_w());
    out_map.fill(0.0);
    let x_img = &x[n * m.c_in * m.h * m.w..(n + 1) * m.c_in * m.h * m.w];
    let w_oc = &w[oc * m.c_in * m.kh * m.kw..(oc + 1) * m.c_in * m.kh * m.kw];
    for ic in 0..m.c_in {
        let x_ch = &x_img[ic * m.h * m.w..(ic + 1) * m.h * m.w];
        let w_ch = &w_oc[ic * m.kh * m.kw..(ic + 1) * m.kh * m.kw];
        for oy in 0..oh {
            for ky in 0..m.kh {
                let iy = (oy * m.stride + ky) as isize - m.pad as isize;
                if iy < 0 || iy >= m.h as isize {
                    continue;
                }
                let x_row = &x_ch[iy as usize * m.w..(iy as usize + 1) * m.w];
                let w_row = &w_ch[ky * m.kw..(ky + 1) * m.kw];
                let o_row = &mut out_map[oy * ow..(oy + 1) * ow];
                for kx in 0..m.kw {
                    let wv = w_row[kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * m.stride + kx) as isize - m.pad as isize;
                        if ix >= 0 && ix < m.w as isize {
                            o_row[ox] += wv * x_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution; output (batch, c_out, out_h, out_w).
pub fn conv2d(x: &[f64], w: &[f64], m: &ConvMeta) -> Vec<f64> {
    let (oh, ow) = (m.out_h(), m.out_w());
    let mut out = vec![0.0; m.batch * m.c_out * oh * ow];
    for_each_chunk(&mut out, oh * ow, |i, map| {
        conv2d_one_map(x, w, m, i / m.c_out, i % m.c_out, map);
    });
    out
}

pub fn conv2d_seq(x: &[f64], w: &[f64], m: &ConvMeta) -> Vec<f64> {
    let (oh, ow) = (m.out_h(), m.out_w());
    let mut out = vec![0.0; m.batch * m.c_out * oh * ow];
    for_each_chunk_seq(&mut out, oh * ow, |i, map| {
        conv2d_one_map(x, w, m, i / m.c_out, i % m.c_out, map);
    });
    out
}

/// Gradient w.r.t. the convolution input. `g` has the forward output shape.
pub fn conv2d_grad_input(g: &[f64], w: &[f64], m: &ConvMeta) -> Vec<f64> {
    let (oh, ow) = (m.out_h(), m.out_w());
    let mut dx = vec![0.0; m.batch * m.c_in * m.h * m.w];
    // Gather form: each input element sums its contributions, so output
    // regions stay disjoint under parallel chunking.
    for_each_chunk(&mut dx, m.h * m.w, |i, dx_map| {
        let n = i / m.c_in;
        let ic = i % m.c_in;
        dx_map.fill(0.0);
        for oc in 0..m.c_out {
            let g_map = &g[(n * m.c_out + oc) * oh * ow..(n * m.c_out + oc + 1) * oh * ow];
            let w_ch = &w[(oc * m.c_in + ic) * m.kh * m.kw..(oc * m.c_in + ic + 1) * m.kh * m.kw];
            for ky in 0..m.kh {
                for kx in 0..m.kw {
                    let wv = w_ch[ky * m.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * m.stride + ky) as isize - m.pad as isize;
                        if iy < 0 || iy >= m.h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * m.stride + kx) as isize - m.pad as isize;
                            if ix >= 0 && ix < m.w as isize {
                                dx_map[iy as usize * m.w + ix as usize] += wv * g_map[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradient w.r.t. the convolution weights.
pub fn conv2d_grad_weight(g: &[f64], x: &[f64], m: &ConvMeta) -> Vec<f64> {
    let (oh, ow) = (m.out_h(), m.out_w());
    let mut dw = vec![0.0; m.c_out * m.c_in * m.kh * m.kw];
    for_each_chunk(&mut dw, m.c_in * m.kh * m.kw, |oc, dw_oc| {
        dw_oc.fill(0.0);
        for n in 0..m.batch {
            let g_map = &g[(n * m.c_out + oc) * oh * ow..(n * m.c_out + oc + 1) * oh * ow];
            for ic in 0..m.c_in {
                let x_ch = &x[(n * m.c_in + ic) * m.h * m.w..(n * m.c_in + ic + 1) * m.h * m.w];
                for ky in 0..m.kh {
                    for kx in 0..m.kw {
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * m.stride + ky) as isize - m.pad as isize;
                            if iy < 0 || iy >= m.h as isize {
                                continue;
                            }
                            let x_row = &x_ch[iy as usize * m.w..(iy as usize + 1) * m.w];
                            let g_row = &g_map[oy * ow..(oy + 1) * ow];
                            for ox in 0..ow {
                                let ix = (ox * m.stride + kx) as isize - m.pad as isize;
                                if ix >= 0 && ix < m.w as isize {
                                    acc += g_row[ox] * x_row[ix as usize];
                                }
                            }
                        }
                        dw_oc[(ic * m.kh + ky) * m.kw + kx] += acc;
                    }
                }
            }
        }
    });
    dw
}

// ---------------------------------------------------------------------------
// Transposed convolution
// ---------------------------------------------------------------------------
//
// Weights are laid out (c_in, c_out, kh, kw). Geometry fields of ConvMeta
// describe the *input* map; tout_h/tout_w give the output size.

fn convt2d_one_map(x: &[f64], w: &[f64], m: &ConvMeta, n: usize, oc: usize, out_map: &mut [f64]) {
    let (toh, tow) = (m.tout_h(), m.tout_w());
    out_map.fill(0.0);
    for ic in 0..m.c_in {
        let x_ch = &x[(n * m.c_in + ic) * m.h * m.w..(n * m.c_in + ic + 1) * m.h * m.w];
        let w_ch = &w[(ic * m.c_out + oc) * m.kh * m.kw..(ic * m.c_out + oc + 1) * m.kh * m.kw];
        for oy in 0..toh {
            for ky in 0..m.kh {
                // oy = iy*stride + ky - pad  =>  iy = (oy + pad - ky)/stride
                let num_y = oy as isize + m.pad as isize - ky as isize;
                if num_y < 0 || num_y % m.stride as isize != 0 {
                    continue;
                }
                let iy = (num_y / m.stride as isize) as usize;
                if iy >= m.h {
                    continue;
                }
                let x_row = &x_ch[iy * m.w..(iy + 1) * m.w];
                let o_row = &mut out_map[oy * tow..(oy + 1) * tow];
                for kx in 0..m.kw {
                    let wv = w_ch[ky * m.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for ox in 0..tow {
                        let num_x = ox as isize + m.pad as isize - kx as isize;
                        if num_x < 0 || num_x % m.stride as isize != 0 {
                            continue;
                        }
                        let ix = (num_x / m.stride as isize) as usize;
                        if ix < m.w {
                            o_row[ox] += wv * x_row[ix];
                        }
                    }
                }
            }
        }
    }
}

pub fn convt2d(x: &[f64], w: &[f64], m: &ConvMeta) -> Vec<f64> {
    let (toh, tow) = (m.tout_h(), m.tout_w());
    let mut out = vec![0.0; m.batch * m.c_out * toh * tow];
    for_each_chunk(&mut out, toh * tow, |i, map| {
        convt2d_one_map(x, w, m, i / m.c_out, i % m.c_out, map);
    });
    out
}

pub fn convt2d_seq(x: &[f64], w: &[f64], m: &ConvMeta) -> Vec<f64> {
    let (toh, tow) = (m.tout_h(), m.tout_w());
    let mut out = vec![0.0; m.batch * m.c_out * toh * tow];
    for_each_chunk_seq(&mut out, toh * tow, |i, map| {
        convt2d_one_map(x, w, m, i / m.c_out, i % m.c_out, map);
    });
    out
}

/// Gradient w.r.t. transposed-convolution input: a stride-s correlation of
/// the output gradient with the kernel.
pub fn convt2d_grad_input(g: &[f64], w: &[f64], m: &ConvMeta) -> Vec<f64> {
    let (toh, tow) = (m.tout_h(), m.tout_w());
    let mut dx = vec![0.0; m.batch * m.c_in * m.h * m.w];
    for_each_chunk(&mut dx, m.h * m.w, |i, dx_map| {
        let n = i / m.c_in;
        let ic = i % m.c_in;
        dx_map.fill(0.0);
        for oc in 0..m.c_out {
            let g_map = &g[(n * m.c_out + oc) * toh * tow..(n * m.c_out + oc + 1) * toh * tow];
            let w_ch = &w[(ic * m.c_out + oc) * m.kh * m.kw..(ic * m.c_out + oc + 1) * m.kh * m.kw];
            for iy in 0..m.h {
                for ky in 0..m.kh {
                    let oy = (iy * m.stride + ky) as isize - m.pad as isize;
                    if oy < 0 || oy >= toh as isize {
                        continue;
                    }
                    let g_row = &g_map[oy as usize * tow..(oy as usize + 1) * tow];
                    for kx in 0..m.kw {
                        let wv = w_ch[ky * m.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for ix in 0..m.w {
                            let ox = (ix * m.stride + kx) as isize - m.pad as isize;
                            if ox >= 0 && ox < tow as isize {
                                dx_map[iy * m.w + ix] += wv * g_row[ox as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

pub fn convt2d_grad_weight(g: &[f64], x: &[f64], m: &ConvMeta) -> Vec<f64> {
    let (toh, tow) = (m.tout_h(), m.tout_w());
    let mut dw = vec![0.0; m.c_in * m.c_out * m.kh * m.kw];
    for_each_chunk(&mut dw, m.c_out * m.kh * m.kw, |ic, dw_ic| {
        dw_ic.fill(0.0);
        for n in 0..m.batch {
            let x_ch = &x[(n * m.c_in + ic) * m.h * m.w..(n * m.c_in + ic + 1) * m.h * m.w];
            for oc in 0..m.c_out {
                let g_map = &g[(n * m.c_out + oc) * toh * tow..(n * m.c_out + oc + 1) * toh * tow];
                for ky in 0..m.kh {
                    for kx in 0..m.kw {
                        let mut acc = 0.0;
                        for iy in 0..m.h {
                            let oy = (iy * m.stride + ky) as isize - m.pad as isize;
                            if oy < 0 || oy >= toh as isize {
                                continue;
                            }
                            for ix in 0..m.w {
                                let ox = (ix * m.stride + kx) as isize - m.pad as isize;
                                if ox >= 0 && ox < tow as isize {
                                    acc += x_ch[iy * m.w + ix]
                                        * g_map[oy as usize * tow + ox as usize];
                                }
                            }
                        }
                        dw_ic[(oc * m.kh + ky) * m.kw + kx] += acc;
                    }
                }
            }
        }
    });
    dw
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Max pooling; returns (output, argmax flat indices into the input).
pub fn maxpool2d(x: &[f64], m: &PoolMeta) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (m.out_h(), m.out_w());
    let maps = m.batch * m.channels;
    let mut out = vec![0.0; maps * oh * ow];
    let mut arg = vec![0usize; maps * oh * ow];
    for i in 0..maps {
        let x_map = &x[i * m.h * m.w..(i + 1) * m.h * m.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ky in 0..m.k {
                    let iy = (oy * m.stride + ky) as isize - m.pad as isize;
                    if iy < 0 || iy >= m.h as isize {
                        continue;
                    }
                    for kx in 0..m.k {
                        let ix = (ox * m.stride + kx) as isize - m.pad as isize;
                        if ix < 0 || ix >= m.w as isize {
                            continue;
                        }
                        let idx = iy as usize * m.w + ix as usize;
                        if x_map[idx] > best {
                            best = x_map[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[(i * oh + oy) * ow + ox] = best;
                arg[(i * oh + oy) * ow + ox] = i * m.h * m.w + best_idx;
            }
        }
    }
    (out, arg)
}

/// Average pooling (used for multi-scale downsampling); pad must be 0.
pub fn avgpool2d(x: &[f64], m: &PoolMeta) -> Vec<f64> {
    assert_eq!(m.pad, 0);
    let (oh, ow) = (m.out_h(), m.out_w());
    let maps = m.batch * m.channels;
    let mut out = vec![0.0; maps * oh * ow];
    let inv = 1.0 / (m.k * m.k) as f64;
    for i in 0..maps {
        let x_map = &x[i * m.h * m.w..(i + 1) * m.h * m.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..m.k {
                    for kx in 0..m.k {
                        acc += x_map[(oy * m.stride + ky) * m.w + (ox * m.stride + kx)];
                    }
                }
                out[(i * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul_seq(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transposed_variants() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // (2,3)
        let b = vec![1.0, 0.0, 2.0, 1.0, 0.0, 1.0]; // (2,3) for a_bt; (2,3) for at_b treats m=2
        // a·bᵀ with b (2,3): result (2,2)
        let ab = matmul_a_bt(&a, &b, 2, 3, 2);
        assert_eq!(ab, vec![1.0 + 6.0, 1.0 + 3.0, 4.0 + 12.0, 4.0 + 6.0]);
        // aᵀ·b with a (2,3), b (2,3): result (3,3); check one entry
        let atb = matmul_at_b(&a, &b, 2, 3, 3);
        // entry (0,0) = a[0][0]*b[0][0] + a[1][0]*b[1][0] = 1*1 + 4*1 = 5
        assert_eq!(atb[0], 5.0);
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel of value 1 reproduces the input.
        let m = ConvMeta {
            batch: 1,
            c_in: 1,
            h: 3,
            w: 3,
            c_out: 1,
            kh: 1,
            kw: 1,
            stride: 1,
            pad: 0,
            out_pad: 0,
        };
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        assert_eq!(conv2d(&x, &[1.0], &m), x);
    }

    #[test]
    fn conv_shapes() {
        let m = ConvMeta {
            batch: 2,
            c_in: 3,
            h: 8,
            w: 8,
            c_out: 4,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            out_pad: 0,
        };
        assert_eq!((m.out_h(), m.out_w()), (4, 4));
        let x = vec![0.5; 2 * 3 * 64];
        let w = vec![0.1; 4 * 3 * 9];
        assert_eq!(conv2d(&x, &w, &m).len(), 2 * 4 * 16);
    }

    #[test]
    fn convt_shapes_double() {
        // k3 s2 p1 out_pad1 doubles the spatial size.
        let m = ConvMeta {
            batch: 1,
            c_in: 2,
            h: 4,
            w: 4,
            c_out: 3,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            out_pad: 1,
        };
        assert_eq!((m.tout_h(), m.tout_w()), (8, 8));
        let x = vec![1.0; 2 * 16];
        let w = vec![0.5; 2 * 3 * 9];
        assert_eq!(convt2d(&x, &w, &m).len(), 3 * 64);
    }

    #[test]
    fn parallel_matches_sequential() {
        let m = ConvMeta {
            batch: 2,
            c_in: 2,
            h: 6,
            w: 6,
            c_out: 3,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            out_pad: 0,
        };
        let x: Vec<f64> = (0..2 * 2 * 36).map(|v| (v as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..3 * 2 * 9).map(|v| (v as f64 * 0.11).cos()).collect();
        assert_eq!(conv2d(&x, &w, &m), conv2d_seq(&x, &w, &m));
        let tm = ConvMeta { c_out: 2, c_in: 2, ..m };
        let wt: Vec<f64> = (0..2 * 2 * 9).map(|v| (v as f64 * 0.21).sin()).collect();
        assert_eq!(convt2d(&x, &wt, &tm), convt2d_seq(&x, &wt, &tm));
    }

    #[test]
    fn maxpool_tracks_argmax() {
        let m = PoolMeta { batch: 1, channels: 1, h: 4, w: 4, k: 2, stride: 2, pad: 0 };
        let x: Vec<f64> = vec![
            1.0, 2.0, 0.0, 0.0, //
            3.0, 4.0, 0.0, 5.0, //
            0.0, 0.0, 9.0, 8.0, //
            0.0, 6.0, 7.0, 0.0,
        ];
        let (out, arg) = maxpool2d(&x, &m);
        assert_eq!(out, vec![4.0, 5.0, 6.0, 9.0]);
        assert_eq!(arg, vec![5, 7, 13, 10]);
    }

    #[test]
    fn avgpool_means() {
        let m = PoolMeta { batch: 1, channels: 1, h: 2, w: 2, k: 2, stride: 2, pad: 0 };
        let out = avgpool2d(&[1.0, 2.0, 3.0, 6.0], &m);
        assert_eq!(out, vec![3.0]);
    }
}
