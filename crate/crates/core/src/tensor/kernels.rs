//! Raw loops behind the tape primitives. Everything here is single-threaded
//! and has a fixed reduction order, so results are bit-reproducible.

/// `c = a·b` (or `c += a·b` when `accumulate`), with `a` logically (m, k)
/// and `b` logically (k, n). A transposed operand is stored in the
/// opposite orientation and read through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserted lengths cover every index reachable through the
    // given strides, and `c` does not alias `a` or `b`.
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub kernel_rows: usize,
    pub kernel_cols: usize,
    pub stride: usize,
    pub out_rows: usize,
    pub out_cols: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_rows * self.kernel_cols
    }

    pub fn out_len(&self) -> usize {
        self.out_rows * self.out_cols
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.rows * self.cols
    }
}

/// Unfold one (channels, rows, cols) image into a (patch_len, out_len) matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let out_len = g.out_len();
    for c in 0..g.channels {
        for ki in 0..g.kernel_rows {
            for kj in 0..g.kernel_cols {
                let row = (c * g.kernel_rows + ki) * g.kernel_cols + kj;
                let dst = &mut cols[row * out_len..(row + 1) * out_len];
                for oy in 0..g.out_rows {
                    let src_row = (c * g.rows + oy * g.stride + ki) * g.cols + kj;
                    let dst_row = &mut dst[oy * g.out_cols..(oy + 1) * g.out_cols];
                    if g.stride == 1 {
                        dst_row.copy_from_slice(&x[src_row..src_row + g.out_cols]);
                    } else {
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            *d = x[src_row + ox * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a (patch_len, out_len) matrix back
/// onto one image gradient.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let out_len = g.out_len();
    for c in 0..g.channels {
        for ki in 0..g.kernel_rows {
            for kj in 0..g.kernel_cols {
                let row = (c * g.kernel_rows + ki) * g.kernel_cols + kj;
                let src = &cols[row * out_len..(row + 1) * out_len];
                for oy in 0..g.out_rows {
                    let dst_row = (c * g.rows + oy * g.stride + ki) * g.cols + kj;
                    let src_row = &src[oy * g.out_cols..(oy + 1) * g.out_cols];
                    if g.stride == 1 {
                        for (d, s) in dx[dst_row..dst_row + g.out_cols].iter_mut().zip(src_row) {
                            *d += *s;
                        }
                    } else {
                        for (ox, s) in src_row.iter().enumerate() {
                            dx[dst_row + ox * g.stride] += *s;
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping max-pool over (n, c, rows, cols). Returns output values
/// and the flat input index of each selected maximum (first one on ties).
pub(crate) fn max_pool(
    x: &[f32],
    planes: usize,
    rows: usize,
    cols: usize,
    size: usize,
) -> (Vec<f32>, Vec<u32>) {
    let out_rows = rows / size;
    let out_cols = cols / size;
    let mut out = Vec::with_capacity(planes * out_rows * out_cols);
    let mut arg = Vec::with_capacity(planes * out_rows * out_cols);
    for p in 0..planes {
        let base = p * rows * cols;
        for oy in 0..out_rows {
            for ox in 0..out_cols {
                let mut best_idx = base + oy * size * cols + ox * size;
                let mut best = x[best_idx];
                for dy in 0..size {
                    let row = base + (oy * size + dy) * cols + ox * size;
                    for dx in 0..size {
                        let v = x[row + dx];
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}
