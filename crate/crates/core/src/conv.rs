//! im2col-based 2-D cross-correlation kernels (NCHW input, OIkk kernel).

use serde::{Deserialize, Serialize};

use crate::tensor::{matmul_a_bt, matmul_at_b, matmul_raw};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output extent `ceil(H / stride)`; the extra padding goes after the input.
    Same,
    /// No padding; output extent `(H - k) / stride + 1`.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

/// Output extent and leading pad along one spatial axis, or `None` if the
/// kernel does not fit.
pub fn output_extent(input: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => (input >= k).then(|| ((input - k) / stride + 1, 0)),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Some((out, total / 2))
        }
    }
}

impl ConvGeometry {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        in_h: usize,
        in_w: usize,
        padding: Padding,
    ) -> Option<Self> {
        let (out_h, pad_top) = output_extent(in_h, k, stride, padding)?;
        let (out_w, pad_left) = output_extent(in_w, k, stride, padding)?;
        Some(Self {
            in_ch,
            out_ch,
            k,
            stride,
            in_h,
            in_w,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input pixel feeding output `(oy, ox)` at kernel offset `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let hw = self.col_cols();
        for c in 0..self.in_ch {
            let plane = &image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            dst[oy * self.out_w + ox] = match self.source(oy, ox, ky, kx) {
                                Some((y, x)) => plane[y * self.in_w + x],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let hw = self.col_cols();
        for c in 0..self.in_ch {
            let plane = &mut image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                                plane[y * self.in_w + x] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, batch: usize, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let in_sz = self.in_ch * self.in_h * self.in_w;
        let out_sz = self.out_ch * self.col_cols();
        let mut cols = vec![0.0; self.col_rows() * self.col_cols()];
        let mut out = Vec::with_capacity(batch * out_sz);
        for n in 0..batch {
            self.im2col(&input[n * in_sz..(n + 1) * in_sz], &mut cols);
            out.extend(matmul_raw(kernel, &cols, self.out_ch, self.col_rows(), self.col_cols()));
        }
        out
    }

    /// Gradients with respect to input and kernel.
    pub fn backward(
        &self,
        batch: usize,
        input: &[f64],
        kernel: &[f64],
        upstream: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let in_sz = self.in_ch * self.in_h * self.in_w;
        let out_sz = self.out_ch * self.col_cols();
        let mut cols = vec![0.0; self.col_rows() * self.col_cols()];
        let mut grad_in = vec![0.0; batch * in_sz];
        let mut grad_k = vec![0.0; kernel.len()];
        for n in 0..batch {
            let up = &upstream[n * out_sz..(n + 1) * out_sz];
            self.im2col(&input[n * in_sz..(n + 1) * in_sz], &mut cols);
            let gk = matmul_a_bt(up, &cols, self.out_ch, self.col_cols(), self.col_rows());
            for (g, v) in grad_k.iter_mut().zip(gk) {
                *g += v;
            }
            let dcols = matmul_at_b(kernel, up, self.out_ch, self.col_rows(), self.col_cols());
            self.col2im(&dcols, &mut grad_in[n * in_sz..(n + 1) * in_sz]);
        }
        (grad_in, grad_k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents() {
        assert_eq!(output_extent(28, 3, 2, Padding::Same), Some((14, 0)));
        assert_eq!(output_extent(7, 3, 2, Padding::Same), Some((4, 1)));
        assert_eq!(output_extent(3, 2, 1, Padding::Valid), Some((2, 0)));
        assert_eq!(output_extent(2, 3, 1, Padding::Valid), None);
        assert_eq!(output_extent(5, 3, 1, Padding::Same), Some((5, 1)));
    }

    #[test]
    fn direct_loop_agrees_with_im2col() {
        // Naive reference on a padded, strided case.
        let g = ConvGeometry::new(2, 3, 3, 2, 5, 4, Padding::Same).unwrap();
        let input: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let kernel: Vec<f64> = (0..3 * 2 * 9).map(|i| (i as f64 * 0.91).cos()).collect();
        let out = g.forward(1, &input, &kernel);
        for o in 0..3 {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let y = (oy * 2 + ky) as isize - g.pad_top as isize;
                                let x = (ox * 2 + kx) as isize - g.pad_left as isize;
                                if y >= 0 && x >= 0 && (y as usize) < 5 && (x as usize) < 4 {
                                    acc += input[c * 20 + y as usize * 4 + x as usize]
                                        * kernel[((o * 2 + c) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    let got = out[(o * g.out_h + oy) * g.out_w + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}
