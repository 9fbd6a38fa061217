//! Slice-level kernels behind the graph operations.
//!
//! Convolutions are lowered to one GEMM over the whole batch: the im2col matrix
//! has one row per (input channel, kernel row, kernel column) and one column
//! per (sample, output row, output column). Every reduction runs in a fixed
//! order, so results are bitwise reproducible and independent of how many
//! samples share a batch.

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output size of a cross-correlation; `None` when no window fits.
    pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = size + 2 * pad;
        (padded >= kernel).then(|| (padded - kernel) / stride + 1)
    }

    /// Output size of a transposed convolution; `None` when it would be empty.
    pub fn transposed_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let full = (size - 1) * stride + kernel;
        (full > 2 * pad).then(|| full - 2 * pad)
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// `c = a · b` (or `c += a · b` when `accumulate`), with `a` m×k and `b` k×n.
/// `a_t`/`b_t` mean the operand is stored transposed (k×m or n×k).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
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

/// Output columns `lo..hi` whose input column `ox·stride + kw − pad` lies
/// inside the image.
fn valid_cols(g: &ConvGeom, kw: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kw).div_ceil(g.stride);
    let hi = if g.in_w + g.pad > kw { (g.in_w + g.pad - kw - 1) / g.stride + 1 } else { 0 };
    (lo.min(g.out_w), hi.min(g.out_w).max(lo.min(g.out_w)))
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, oh, ow) = (g.kernel, g.out_h, g.out_w);
    let plane = oh * ow;
    let ncols = g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * ncols];
    for c in 0..g.in_channels {
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &x[(n * g.in_channels + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.in_w..][..g.in_w];
                        let dst_out = &mut dst[oy * ow..(oy + 1) * ow];
                        let (lo, hi) = valid_cols(g, kw);
                        for ox in lo..hi {
                            dst_out[ox] = src_row[ox * g.stride + kw - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds an im2col matrix back onto an NCHW image (adjoint of `im2col`).
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, oh, ow) = (g.kernel, g.out_h, g.out_w);
    let plane = oh * ow;
    let ncols = g.col_cols();
    let mut x = vec![0.0; g.batch * g.in_channels * g.in_h * g.in_w];
    for c in 0..g.in_channels {
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let dst = &mut x[(n * g.in_channels + c) * g.in_h * g.in_w..][..g.in_h * g.in_w];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.in_w..][..g.in_w];
                        let src_out = &src[oy * ow..(oy + 1) * ow];
                        let (lo, hi) = valid_cols(g, kw);
                        for ox in lo..hi {
                            dst_row[ox * g.stride + kw - g.pad] += src_out[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// NCHW (as N×C×P) to a C×(N·P) matrix.
pub(crate) fn batch_to_channel_major(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            out[ch * n * p + s * p..][..p].copy_from_slice(&x[(s * c + ch) * p..][..p]);
        }
    }
    out
}

/// Inverse of [`batch_to_channel_major`].
pub(crate) fn channel_major_to_batch(m: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m.len()];
    for s in 0..n {
        for ch in 0..c {
            out[(s * c + ch) * p..][..p].copy_from_slice(&m[ch * n * p + s * p..][..p]);
        }
    }
    out
}

/// Cross-correlation forward. `w` is O×(C·K·K) row-major. Also returns the
/// im2col matrix, which the weight gradient reuses.
pub(crate) fn conv_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    out_c: usize,
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(x, g);
    let ncols = g.col_cols();
    let mut out = vec![0.0; out_c * ncols];
    gemm(out_c, g.col_rows(), ncols, w, false, &cols, false, &mut out, false);
    let plane = g.out_h * g.out_w;
    let mut y = channel_major_to_batch(&out, g.batch, out_c, plane);
    if let Some(b) = bias {
        for s in 0..g.batch {
            for (o, bo) in b.iter().enumerate() {
                y[(s * out_c + o) * plane..][..plane].iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    (y, cols)
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

/// `cols` is the forward im2col matrix when available; otherwise it is
/// rebuilt from `x`.
pub(crate) fn conv_backward(
    x: &[f64],
    cols: Option<&[f64]>,
    w: &[f64],
    dy: &[f64],
    out_c: usize,
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads {
    let plane = g.out_h * g.out_w;
    let ncols = g.col_cols();
    let rows = g.col_rows();
    let dy_m = batch_to_channel_major(dy, g.batch, out_c, plane);
    let weight = want.1.then(|| {
        let rebuilt;
        let cols = match cols {
            Some(c) => c,
            None => {
                rebuilt = im2col(x, g);
                &rebuilt
            }
        };
        let mut dw = vec![0.0; out_c * rows];
        gemm(out_c, ncols, rows, &dy_m, false, cols, true, &mut dw, false);
        dw
    });
    let input = want.0.then(|| {
        let mut dcols = vec![0.0; rows * ncols];
        gemm(rows, out_c, ncols, w, true, &dy_m, false, &mut dcols, false);
        col2im(&dcols, g)
    });
    let bias = want.2.then(|| {
        dy_m.chunks(ncols).map(|r| r.iter().sum()).collect()
    });
    ConvGrads { input, weight, bias }
}

/// Transposed convolution forward. `x` is N×I×H×W, `w` is I×(O·K·K); `g`
/// describes the *output* image as the im2col source (in_channels = O).
pub(crate) fn conv_transpose_forward(x: &[f64], w: &[f64], in_c: usize, g: &ConvGeom) -> Vec<f64> {
    let p_in = g.out_h * g.out_w;
    let x_m = batch_to_channel_major(x, g.batch, in_c, p_in);
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    gemm(g.col_rows(), in_c, g.col_cols(), w, true, &x_m, false, &mut cols, false);
    col2im(&cols, g)
}

pub(crate) fn conv_transpose_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    in_c: usize,
    g: &ConvGeom,
    want: (bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let p_in = g.out_h * g.out_w;
    let dcols = im2col(dy, g);
    let dx = want.0.then(|| {
        let mut dx_m = vec![0.0; in_c * g.col_cols()];
        gemm(in_c, g.col_rows(), g.col_cols(), w, false, &dcols, false, &mut dx_m, false);
        channel_major_to_batch(&dx_m, g.batch, in_c, p_in)
    });
    let dw = want.1.then(|| {
        let x_m = batch_to_channel_major(x, g.batch, in_c, p_in);
        let mut dw = vec![0.0; in_c * g.col_rows()];
        gemm(in_c, g.col_cols(), g.col_rows(), &x_m, false, &dcols, true, &mut dw, false);
        dw
    });
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn output_sizes() {
        assert_eq!(ConvGeom::conv_out(64, 4, 2, 1), Some(32));
        assert_eq!(ConvGeom::conv_out(4, 4, 1, 0), Some(1));
        assert_eq!(ConvGeom::conv_out(2, 4, 1, 0), None);
        assert_eq!(ConvGeom::transposed_out(4, 4, 2, 1), Some(8));
        assert_eq!(ConvGeom::transposed_out(1, 1, 1, 1), None);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom { batch: 2, in_channels: 2, in_h: 5, in_w: 4, kernel: 3, stride: 2, pad: 1, out_h: 3, out_w: 2 };
        let x: Vec<f64> = (0..g.batch * 2 * 20).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&c, &g)).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
