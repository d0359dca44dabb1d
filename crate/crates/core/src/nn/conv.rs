//! Patch-matrix (im2col) helpers for 2D and 3D cross-correlation.
//!
//! Everything is expressed in 3D `(depth, height, width)`; a 2D convolution
//! is the special case with depth 1 and a depth-1 kernel.

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;

/// Geometry of one cross-correlation over a `(channels, d, h, w)` volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    /// `None` when the kernel does not fit the padded input or a stride is zero.
    pub fn new(channels: usize, in_dims: [usize; 3], kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Option<Self> {
        let mut out_dims = [0; 3];
        for i in 0..3 {
            let padded = in_dims[i] + 2 * padding[i];
            if stride[i] == 0 || kernel[i] == 0 || padded < kernel[i] {
                return None;
            }
            out_dims[i] = (padded - kernel[i]) / stride[i] + 1;
        }
        Some(Self { channels, in_dims, kernel, stride, padding, out_dims })
    }

    /// Geometry whose forward map takes the transposed convolution's output
    /// back to its input; `None` if the sizes are inconsistent.
    pub fn for_transpose(
        out_channels: usize,
        in_dims: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        output_padding: [usize; 3],
    ) -> Option<Self> {
        let mut full = [0; 3];
        for i in 0..3 {
            if in_dims[i] == 0 || output_padding[i] >= stride[i].max(1) {
                return None;
            }
            let grown = (in_dims[i] - 1) * stride[i] + kernel[i] + output_padding[i];
            full[i] = grown.checked_sub(2 * padding[i])?;
        }
        let g = Self::new(out_channels, full, kernel, stride, padding)?;
        (g.out_dims == in_dims).then_some(g)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the patch matrix: `channels * kd * kh * kw`.
    pub fn patch_rows(&self) -> usize {
        self.channels * self.kernel_volume()
    }

    /// Columns of the patch matrix: number of output positions.
    pub fn patch_cols(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn in_volume(&self) -> usize {
        self.in_dims.iter().product()
    }
}

#[inline]
fn src_index(o: usize, k: usize, s: usize, p: usize, n: usize) -> Option<usize> {
    let i = (o * s + k) as isize - p as isize;
    (i >= 0 && (i as usize) < n).then_some(i as usize)
}

/// Unfold `x` (`channels x in_dims`) into `cols` (`patch_rows x patch_cols`).
pub fn im2col<F: Scalar>(x: &[F], g: &ConvGeom, cols: &mut [F]) {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let n = g.patch_cols();
    debug_assert_eq!(x.len(), g.channels * d * h * w);
    debug_assert_eq!(cols.len(), g.patch_rows() * n);
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for zo in 0..od {
                        let plane = &mut dst[zo * oh * ow..(zo + 1) * oh * ow];
                        let Some(zi) = src_index(zo, a, sd, pd, d) else {
                            plane.fill(F::zero());
                            continue;
                        };
                        for yo in 0..oh {
                            let line = &mut plane[yo * ow..(yo + 1) * ow];
                            let Some(yi) = src_index(yo, b, sh, ph, h) else {
                                line.fill(F::zero());
                                continue;
                            };
                            let src = &xc[(zi * h + yi) * w..(zi * h + yi + 1) * w];
                            for (xo, out) in line.iter_mut().enumerate() {
                                *out = match src_index(xo, e, sw, pw, w) {
                                    Some(xi) => src[xi],
                                    None => F::zero(),
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into `x`.
pub fn col2im<F: Scalar>(cols: &[F], g: &ConvGeom, x: &mut [F]) {
    let [d, h, w] = g.in_dims;
    let [od, oh, ow] = g.out_dims;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let n = g.patch_cols();
    debug_assert_eq!(x.len(), g.channels * d * h * w);
    let mut row = 0;
    for c in 0..g.channels {
        let xc = &mut x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * n..(row + 1) * n];
                    for zo in 0..od {
                        let Some(zi) = src_index(zo, a, sd, pd, d) else { continue };
                        for yo in 0..oh {
                            let Some(yi) = src_index(yo, b, sh, ph, h) else { continue };
                            let line = &src[(zo * oh + yo) * ow..(zo * oh + yo + 1) * ow];
                            let dst = &mut xc[(zi * h + yi) * w..(zi * h + yi + 1) * w];
                            for (xo, &v) in line.iter().enumerate() {
                                if let Some(xi) = src_index(xo, e, sw, pw, w) {
                                    dst[xi] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dims() {
        let g = ConvGeom::new(1, [1, 132, 96], [1, 3, 3], [1, 2, 2], [0, 1, 1]).unwrap();
        assert_eq!(g.out_dims, [1, 66, 48]);
        let g = ConvGeom::new(1, [3, 5, 5], [3, 3, 3], [1, 1, 1], [0, 0, 0]).unwrap();
        assert_eq!(g.out_dims, [1, 3, 3]);
        assert!(ConvGeom::new(1, [1, 2, 2], [1, 3, 3], [1, 1, 1], [0, 0, 0]).is_none());
    }

    #[test]
    fn transpose_geometry_inverts_sizes() {
        let g = ConvGeom::for_transpose(16, [1, 33, 24], [1, 3, 3], [1, 2, 2], [0, 1, 1], [0, 1, 1]).unwrap();
        assert_eq!(g.in_dims, [1, 66, 48]);
        assert_eq!(g.out_dims, [1, 33, 24]);
        assert!(ConvGeom::for_transpose(1, [1, 4, 4], [1, 3, 3], [1, 2, 2], [0, 1, 1], [0, 2, 2]).is_none());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, [3, 5, 4], [2, 3, 3], [1, 2, 1], [1, 1, 0]).unwrap();
        let x: Vec<f64> = (0..2 * g.in_volume()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..g.patch_rows() * g.patch_cols()).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
