//! Dense kernels shared by the forward and backward passes.
//!
//! Convolutions are lowered to matrix products through `im2col`/`col2im`.
//! The products run on `matrixmultiply::sgemm`, which is single-threaded
//! here, so results are bit-reproducible for a fixed build.

/// Row-major matrix view description for [`gemm`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transposed view of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [f32], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }

    fn check(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = (self.rows as isize - 1) * self.row_stride + (self.cols as isize - 1) * self.col_stride;
        assert!(
            (last as usize) < self.data.len(),
            "matrix view {}x{} exceeds buffer of {}",
            self.rows,
            self.cols,
            self.data.len()
        );
    }
}

/// `out = beta * out + a * b` where `out` is row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f32], beta: f32) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert_eq!(out.len(), a.rows * b.cols, "gemm output size");
    a.check();
    b.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            out.fill(0.0);
        } else {
            out.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    // SAFETY: every view was bounds-checked above against its backing slice,
    // and `out` is exactly m*n contiguous elements in row-major order.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    /// Output extent of a strided correlation, `None` if the kernel does not fit.
    pub fn conv_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = size + 2 * pad;
        if stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    /// Output extent of the transposed correlation.
    pub fn transpose_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        if size == 0 || stride == 0 {
            return None;
        }
        ((size - 1) * stride + kernel).checked_sub(2 * pad).filter(|&v| v > 0)
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Unfolds one `[C, H, W]` image into `[C*k*k, Ho*Wo]` patch columns.
pub(crate) fn im2col(image: &[f32], g: &ConvGeometry, col: &mut [f32]) {
    debug_assert_eq!(image.len(), g.channels * g.height * g.width);
    debug_assert_eq!(col.len(), g.patch_len() * g.positions());
    let k = g.kernel;
    let positions = g.positions();
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * positions..(row + 1) * positions];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
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

/// Adjoint of [`im2col`]: scatters patch columns back, accumulating into `image`.
pub(crate) fn col2im(col: &[f32], g: &ConvGeometry, image: &mut [f32]) {
    debug_assert_eq!(image.len(), g.channels * g.height * g.width);
    debug_assert_eq!(col.len(), g.patch_len() * g.positions());
    let k = g.kernel;
    let positions = g.positions();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * positions..(row + 1) * positions];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Sum accumulated in f64.
pub(crate) fn sum_f64(values: &[f32]) -> f64 {
    values.iter().map(|&v| v as f64).sum()
}
