//! Raw numeric kernels over row-major slices.

use crate::par;

/// `c[m,n] = a[m,k] * b[k,n]`, accumulating over `k` in order.
pub fn matmul_seq(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        matmul_row(&a[i * k..(i + 1) * k], b, &mut c[i * n..(i + 1) * n], n);
    }
}

#[inline]
fn matmul_row(a_row: &[f64], b: &[f64], c_row: &mut [f64], n: usize) {
    c_row.iter_mut().for_each(|x| *x = 0.0);
    for (p, &a) in a_row.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (c, &b) in c_row.iter_mut().zip(b_row) {
            *c += a * b;
        }
    }
}

/// Row-parallel version of [`matmul_seq`]; bit-identical output.
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    par::for_each_chunk_sized(c, n, m * k * n, |i, c_row| {
        matmul_row(&a[i * k..(i + 1) * k], b, c_row, n)
    });
}

/// `c[m,n] = a[m,k] * b[n,k]^T` (dot products of rows).
pub fn matmul_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    par::for_each_chunk_sized(c, n, m * k * n, |i, c_row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, c) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *c = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    });
}

/// `c[k,n] = a[m,k]^T * b[m,n]`, accumulating over `m` in order.
pub fn matmul_at(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    par::for_each_chunk_sized(c, n, m * k * n, |p, c_row| {
        c_row.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..m {
            let a = a[i * k + p];
            if a == 0.0 {
                continue;
            }
            for (c, &b) in c_row.iter_mut().zip(&b[i * n..(i + 1) * n]) {
                *c += a * b;
            }
        }
    });
}

/// Geometry of a 2-D convolution over one `[C, H, W]` sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || height + 2 * pad < kernel_h || width + 2 * pad < kernel_w {
            return None;
        }
        Some(ConvGeometry {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel_h) / stride + 1,
            out_w: (width + 2 * pad - kernel_w) / stride + 1,
        })
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Valid output columns `[lo, hi)` for kernel column `kx`, i.e. those
    /// whose input column lands inside the image.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let (s, p, w) = (self.stride, self.pad, self.width);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if w + p > kx { ((w + p - kx - 1) / s + 1).min(self.out_w) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Calls `f(patch_row, out_offset, input_offset, count)` for every run
    /// of in-image patch entries, in patch-row-major order. Within a run
    /// the output advances by 1 and the input by `stride`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let mut q = 0;
        for c in 0..self.channels {
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let (lo, hi) = self.col_range(kx);
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + ky) as isize - self.pad as isize;
                        if y < 0 || y >= self.height as isize || lo == hi {
                            continue;
                        }
                        let x0 = lo * self.stride + kx - self.pad;
                        let src = (c * self.height + y as usize) * self.width + x0;
                        f(q, oy * self.out_w + lo, src, hi - lo);
                    }
                    q += 1;
                }
            }
        }
    }

    /// Unfolds one sample into a `[patch_len, out_len]` matrix.
    pub fn im2col(&self, input: &[f64], cols: &mut [f64]) {
        let ol = self.out_len();
        let st = self.stride;
        cols.iter_mut().for_each(|x| *x = 0.0);
        self.for_each_run(|q, l, src, n| {
            let dst = &mut cols[q * ol + l..q * ol + l + n];
            if st == 1 {
                dst.copy_from_slice(&input[src..src + n]);
            } else {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = input[src + i * st];
                }
            }
        });
    }

    /// Folds a patch matrix back onto one sample, summing overlaps in a fixed
    /// order.
    pub fn col2im(&self, cols: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        let ol = self.out_len();
        let st = self.stride;
        self.for_each_run(|q, l, src, n| {
            let from = &cols[q * ol + l..q * ol + l + n];
            for (i, v) in from.iter().enumerate() {
                out[src + i * st] += v;
            }
        });
    }
}
