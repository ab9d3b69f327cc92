//! Convolution geometry plus the im2col/col2im kernels shared by `conv2d`
//! and its adjoint.

use crate::tensor::Element;

/// Geometry of a square-kernel, zero same-padded 2-D convolution.
///
/// Output extents are `ceil(in / stride)`; the padding needed to reach that
/// is split with the smaller half on the top/left.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

pub fn same_extent(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

fn pad_before(input: usize, output: usize, kernel: usize, stride: usize) -> usize {
    ((output - 1) * stride + kernel).saturating_sub(input) / 2
}

impl ConvGeom {
    pub fn same(in_c: usize, in_h: usize, in_w: usize, out_c: usize, kernel: usize, stride: usize) -> Self {
        let out_h = same_extent(in_h, stride);
        let out_w = same_extent(in_w, stride);
        ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            out_h,
            out_w,
            kernel,
            stride,
            pad_top: pad_before(in_h, out_h, kernel, stride),
            pad_left: pad_before(in_w, out_w, kernel, stride),
        }
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_pixels(&self) -> usize {
        self.in_h * self.in_w
    }

    /// A 1×1 stride-1 convolution reads its input directly as the patch matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// Unfolds one `[in_c, in_h, in_w]` image into `cols[patch_len, out_pixels]`.
    pub fn im2col<T: Element>(&self, image: &[T], cols: &mut [T]) {
        let k = self.kernel;
        let p = self.out_pixels();
        for c in 0..self.in_c {
            let plane = &image[c * self.in_pixels()..(c + 1) * self.in_pixels()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                        let dst = &mut row[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                            *d = if ix < 0 || ix >= self.in_w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatter-adds `cols` into `image`.
    pub fn col2im<T: Element>(&self, cols: &[T], image: &mut [T]) {
        let k = self.kernel;
        let p = self.out_pixels();
        for c in 0..self.in_c {
            let plane = &mut image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        let src = &row[oy * self.out_w..(oy + 1) * self.out_w];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        let g = ConvGeom::same(3, 32, 32, 16, 3, 1);
        assert_eq!((g.out_h, g.out_w, g.pad_top, g.pad_left), (32, 32, 1, 1));
        let g = ConvGeom::same(16, 32, 32, 32, 3, 2);
        assert_eq!((g.out_h, g.out_w, g.pad_top), (16, 16, 0));
        let g = ConvGeom::same(16, 5, 7, 32, 3, 2);
        assert_eq!((g.out_h, g.out_w, g.pad_top, g.pad_left), (3, 4, 1, 1));
        let g = ConvGeom::same(4, 6, 6, 1, 1, 1);
        assert_eq!((g.out_h, g.pad_top), (6, 0));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::same(2, 5, 6, 1, 3, 2);
        let x: Vec<f64> = (0..2 * 30).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let c: Vec<f64> = (0..g.patch_len() * g.out_pixels()).map(|i| ((i * 104729) % 11) as f64 - 5.0).collect();
        let mut cols = vec![0.0; c.len()];
        g.im2col(&x, &mut cols);
        let mut back = vec![0.0; x.len()];
        g.col2im(&c, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
