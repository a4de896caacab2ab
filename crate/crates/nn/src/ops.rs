//! Matrix kernels shared by the convolution and dense layers.

/// `c = a·b (+ c when accumulate)` for row-major matrices. `a` is `m×k`
/// (or `k×m` when `a_t`), `b` is `k×n` (or `n×k` when `b_t`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major extents whose lengths are asserted above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Sliding-window geometry of a 2-D convolution over one batch item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    #[inline]
    pub fn col_rows(&self) -> usize {
        self.channels * self.k_h * self.k_w
    }

    #[inline]
    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds `image` (`channels×in_h×in_w`) into a
    /// `(channels·k_h·k_w) × (out_h·out_w)` column matrix.
    pub fn im2col(&self, image: &[f32], cols: &mut [f32]) {
        let p = self.col_cols();
        debug_assert_eq!(cols.len(), self.col_rows() * p);
        for c in 0..self.channels {
            let plane = &image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.k_h {
                for kx in 0..self.k_w {
                    let row = (c * self.k_h + ky) * self.k_w + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride_h + ky) as isize - self.pad_top as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride_w + kx) as isize - self.pad_left as isize;
                            *d = if ix < 0 || ix >= self.in_w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters-adds columns back into `image`.
    pub fn col2im(&self, cols: &[f32], image: &mut [f32]) {
        let p = self.col_cols();
        debug_assert_eq!(cols.len(), self.col_rows() * p);
        for c in 0..self.channels {
            let plane = &mut image[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.k_h {
                for kx in 0..self.k_w {
                    let row = (c * self.k_h + ky) * self.k_w + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride_h + ky) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let base = iy as usize * self.in_w;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride_w + kx) as isize - self.pad_left as isize;
                            if ix >= 0 && (ix as usize) < self.in_w {
                                plane[base + ix as usize] += src[oy * self.out_w + ox];
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
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32).sin()).collect();
        let naive = |a_at: &dyn Fn(usize, usize) -> f32, b_at: &dyn Fn(usize, usize) -> f32| {
            let mut c = vec![0.0f32; m * n];
            for i in 0..m {
                for j in 0..n {
                    c[i * n + j] = (0..k).map(|p| a_at(i, p) * b_at(p, j)).sum();
                }
            }
            c
        };
        let want = naive(&|i, p| a[i * k + p], &|p, j| b[p * n + j]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, false);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-5);
        }
        // transposed storage of the same operands
        let at: Vec<f32> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f32> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut c2 = vec![1.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c2, true);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - (y + 1.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            channels: 2,
            in_h: 2,
            in_w: 9,
            k_h: 2,
            k_w: 3,
            stride_h: 1,
            stride_w: 2,
            pad_top: 0,
            pad_left: 1,
            out_h: 2,
            out_w: 5,
        };
        let x: Vec<f32> = (0..2 * 2 * 9).map(|i| (i as f32 * 0.37).cos()).collect();
        let y: Vec<f32> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f32 * 0.11).sin())
            .collect();
        let mut cols = vec![0.0; y.len()];
        g.im2col(&x, &mut cols);
        let lhs: f32 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        g.col2im(&y, &mut back);
        let rhs: f32 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }
}
