//! Per-sample convolution, pooling and upsampling kernels on flat slices.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Unfold a `(c, h, w)` plane stack into `(c*9, h*w)` columns for a 3×3
/// same-padded convolution.
pub(crate) fn im2col3(x: &[f32], c: usize, h: usize, w: usize, col: &mut [f32]) {
    let hw = h * w;
    debug_assert_eq!(col.len(), c * 9 * hw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: accumulate columns back into `(c, h, w)`.
pub(crate) fn col2im3(col: &[f32], c: usize, h: usize, w: usize, dx: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvShape {
    fn rows(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }
}

/// `y = W * unfold(x) + b` for one sample. `scratch` must hold `rows * h * w`
/// floats for 3×3 kernels.
pub(crate) fn conv_forward(s: &ConvShape, x: &[f32], weight: &[f32], bias: &[f32], y: &mut [f32], scratch: &mut Vec<f32>) {
    let hw = s.h * s.w;
    let wmat = ArrayView2::from_shape((s.cout, s.rows()), weight).expect("weight shape");
    let mut out = ArrayViewMut2::from_shape((s.cout, hw), y).expect("output shape");
    for (o, row) in out.outer_iter_mut().enumerate() {
        let b = bias[o];
        for v in row {
            *v = b;
        }
    }
    if s.kernel == 1 {
        let xm = ArrayView2::from_shape((s.cin, hw), x).expect("input shape");
        general_mat_mul(1.0, &wmat, &xm, 1.0, &mut out);
    } else {
        scratch.resize(s.rows() * hw, 0.0);
        im2col3(x, s.cin, s.h, s.w, scratch);
        let col = ArrayView2::from_shape((s.rows(), hw), &scratch[..]).expect("col shape");
        general_mat_mul(1.0, &wmat, &col, 1.0, &mut out);
    }
}

/// Gradients for one sample. Accumulates into `dweight`/`dbias` when given and
/// writes (accumulates) the input gradient into `dx` when given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    s: &ConvShape,
    x: &[f32],
    weight: &[f32],
    dy: &[f32],
    dweight: Option<(&mut [f32], &mut [f32])>,
    dx: Option<&mut [f32]>,
    scratch: &mut Vec<f32>,
) {
    let hw = s.h * s.w;
    let rows = s.rows();
    let dym = ArrayView2::from_shape((s.cout, hw), dy).expect("grad shape");
    if let Some((dw, db)) = dweight {
        for (o, row) in dym.outer_iter().enumerate() {
            db[o] += row.sum();
        }
        let mut dwm = ArrayViewMut2::from_shape((s.cout, rows), dw).expect("dweight shape");
        if s.kernel == 1 {
            let xm = ArrayView2::from_shape((s.cin, hw), x).expect("input shape");
            general_mat_mul(1.0, &dym, &xm.t(), 1.0, &mut dwm);
        } else {
            scratch.resize(rows * hw, 0.0);
            im2col3(x, s.cin, s.h, s.w, scratch);
            let col = ArrayView2::from_shape((rows, hw), &scratch[..]).expect("col shape");
            general_mat_mul(1.0, &dym, &col.t(), 1.0, &mut dwm);
        }
    }
    if let Some(dx) = dx {
        let wmat = ArrayView2::from_shape((s.cout, rows), weight).expect("weight shape");
        if s.kernel == 1 {
            let mut dxm = ArrayViewMut2::from_shape((s.cin, hw), dx).expect("dx shape");
            general_mat_mul(1.0, &wmat.t(), &dym, 1.0, &mut dxm);
        } else {
            scratch.resize(rows * hw, 0.0);
            {
                let mut dcol = ArrayViewMut2::from_shape((rows, hw), &mut scratch[..]).expect("col shape");
                general_mat_mul(1.0, &wmat.t(), &dym, 0.0, &mut dcol);
            }
            col2im3(scratch, s.cin, s.h, s.w, dx);
        }
    }
}

/// 2×2 max pooling of a `(c, h, w)` stack; records the winning input offset.
/// A NaN input wins its window.
pub(crate) fn maxpool2(x: &[f32], c: usize, h: usize, w: usize, y: &mut [f32], argmax: &mut [u32], base: usize) {
    let (oh, ow) = (h / 2, w / 2);
    for ci in 0..c {
        let plane = ci * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = plane + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = plane + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] || x[idx].is_nan() {
                        best = idx;
                    }
                }
                let o = ci * oh * ow + oy * ow + ox;
                y[o] = x[best];
                argmax[o] = (base + best) as u32;
            }
        }
    }
}

/// Nearest-neighbour 2× upsampling of a `(c, h, w)` stack.
pub(crate) fn upsample2(x: &[f32], c: usize, h: usize, w: usize, y: &mut [f32]) {
    let ow = 2 * w;
    for ci in 0..c {
        for yy in 0..2 * h {
            let src = &x[ci * h * w + (yy / 2) * w..][..w];
            let dst = &mut y[ci * 4 * h * w + yy * ow..][..ow];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
}

/// Adjoint of [`upsample2`].
pub(crate) fn upsample2_backward(dy: &[f32], c: usize, h: usize, w: usize, dx: &mut [f32]) {
    let ow = 2 * w;
    for ci in 0..c {
        for yy in 0..2 * h {
            let src = &dy[ci * 4 * h * w + yy * ow..][..ow];
            let dst = &mut dx[ci * h * w + (yy / 2) * w..][..w];
            for (xx, g) in src.iter().enumerate() {
                dst[xx / 2] += g;
            }
        }
    }
}
