//! 2-D convolution via im2col + GEMM.
//!
//! The column matrix is laid out `(in_c * kh * kw, n * out_h * out_w)` so the
//! innermost image axis stays contiguous for both the gather (im2col) and the
//! scatter-add (col2im), and the forward GEMM needs no transposed operands.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    /// `(out_c, in_c, kh, kw)`
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_c * kernel * kernel) as f32;
        let limit = (6.0 / fan_in).sqrt();
        let weight = Array4::from_shape_simple_fn((out_c, in_c, kernel, kernel), || {
            rng.random_range(-limit..limit)
        });
        Conv2d {
            name: name.to_string(),
            weight,
            bias: Array1::zeros(out_c),
            stride,
            padding,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let kh = self.weight.shape()[2];
        let kw = self.weight.shape()[3];
        (
            (h + 2 * self.padding - kh) / self.stride + 1,
            (w + 2 * self.padding - kw) / self.stride + 1,
        )
    }

    /// Forward pass; returns the output and the column matrix for backward.
    pub fn forward(&self, x: &Array4<f32>) -> (Array4<f32>, Array2<f32>) {
        let (n, _, h, w) = x.dim();
        let (out_c, in_c, kh, kw) = self.weight.dim();
        debug_assert_eq!(in_c, x.dim().1, "conv {}: channel mismatch", self.name);
        let (oh, ow) = self.out_hw(h, w);
        let col = im2col(x, kh, kw, self.stride, self.padding);
        let q = in_c * kh * kw;
        let wmat = self
            .weight
            .view()
            .into_shape_with_order((out_c, q))
            .expect("conv weight is contiguous");
        let mut out2 = wmat.dot(&col); // (out_c, n*oh*ow)
        for (mut row, b) in out2.rows_mut().into_iter().zip(self.bias.iter()) {
            row += *b;
        }
        let out = out2
            .into_shape_with_order((out_c, n, oh, ow))
            .expect("gemm output is contiguous")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned();
        (out, col)
    }

    /// Backward pass. `dx` is always produced; parameter gradients only when
    /// `param_grads` is given (skipping them saves a GEMM when the layer is
    /// frozen, e.g. a suspect model guiding a trigger generator).
    pub fn backward(
        &self,
        col: &Array2<f32>,
        in_dim: (usize, usize, usize, usize),
        dout: &Array4<f32>,
        mut param_grads: Option<(&mut Array4<f32>, &mut Array1<f32>)>,
    ) -> Array4<f32> {
        let (n, c, h, w) = in_dim;
        let (out_c, in_c, kh, kw) = self.weight.dim();
        let (oh, ow) = self.out_hw(h, w);
        let q = in_c * kh * kw;
        let dout2 = dout
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_shape_with_order((out_c, n * oh * ow))
            .expect("dout reshaped")
            .to_owned();
        if let Some((dw, db)) = param_grads.as_mut() {
            let dwmat = dout2.dot(&col.t()); // (out_c, q)
            let dw4 = dwmat
                .into_shape_with_order((out_c, in_c, kh, kw))
                .expect("dw reshaped");
            **dw += &dw4;
            **db += &dout2.sum_axis(ndarray::Axis(1));
        }
        let wmat = self
            .weight
            .view()
            .into_shape_with_order((out_c, q))
            .expect("conv weight is contiguous");
        let dcol = wmat.t().dot(&dout2); // (q, n*oh*ow)
        col2im(&dcol, (n, c, h, w), kh, kw, self.stride, self.padding)
    }
}

/// Gather image patches into `(c*kh*kw, n*oh*ow)`.
pub fn im2col(x: &Array4<f32>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f32> {
    let (n, c, h, w) = x.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let m = n * oh * ow;
    let q = c * kh * kw;
    let mut col = Array2::<f32>::zeros((q, m));
    let xs = x.as_slice().expect("input is standard layout");
    let cs = col.as_slice_mut().expect("col is standard layout");
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let qidx = (ci * kh + i) * kw + j;
                for ni in 0..n {
                    let x_base = (ni * c + ci) * h * w;
                    for oi in 0..oh {
                        // padded coordinates; wrapping_sub flags out-of-range as huge
                        let iy = (oi * stride + i).wrapping_sub(pad);
                        if iy >= h {
                            continue;
                        }
                        let dst_base = qidx * m + (ni * oh + oi) * ow;
                        let src_base = x_base + iy * w;
                        if stride == 1 {
                            let lo = pad.saturating_sub(j);
                            let hi = ow.min(w + pad - j);
                            if lo < hi {
                                let src = &xs[src_base + (lo + j - pad)..src_base + (hi + j - pad)];
                                cs[dst_base + lo..dst_base + hi].copy_from_slice(src);
                            }
                        } else {
                            for oj in 0..ow {
                                let ix = (oj * stride + j).wrapping_sub(pad);
                                if ix < w {
                                    cs[dst_base + oj] = xs[src_base + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add column gradients back to image shape.
pub fn col2im(
    dcol: &Array2<f32>,
    in_dim: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (n, c, h, w) = in_dim;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let m = n * oh * ow;
    let mut dx = Array4::<f32>::zeros((n, c, h, w));
    let ds = dcol.as_slice().expect("dcol is standard layout");
    let xs = dx.as_slice_mut().expect("dx is standard layout");
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let qidx = (ci * kh + i) * kw + j;
                for ni in 0..n {
                    let x_base = (ni * c + ci) * h * w;
                    for oi in 0..oh {
                        let iy = (oi * stride + i).wrapping_sub(pad);
                        if iy >= h {
                            continue;
                        }
                        let src_base = qidx * m + (ni * oh + oi) * ow;
                        let dst_base = x_base + iy * w;
                        if stride == 1 {
                            let lo = pad.saturating_sub(j);
                            let hi = ow.min(w + pad - j);
                            for oj in lo..hi {
                                xs[dst_base + (oj + j - pad)] += ds[src_base + oj];
                            }
                        } else {
                            for oj in 0..ow {
                                let ix = (oj * stride + j).wrapping_sub(pad);
                                if ix < w {
                                    xs[dst_base + ix] += ds[src_base + oj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
