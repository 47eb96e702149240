use serde::{Deserialize, Serialize};

use super::{gemm, Real};

/// Stride, zero padding and dilation of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec { stride: 1, padding: 0, dilation: 1 }
    }
}

/// Output extent along one axis, or `None` when no window fits.
pub fn conv_output_extent(input: usize, kernel: usize, spec: Conv2dSpec) -> Option<usize> {
    if kernel == 0 || spec.stride == 0 || spec.dilation == 0 {
        return None;
    }
    let span = spec.dilation * (kernel - 1) + 1;
    let padded = input + 2 * spec.padding;
    (padded >= span).then(|| (padded - span) / spec.stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: Conv2dSpec,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Real>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let (k, s, p, d) = (g.k, g.spec.stride, g.spec.padding, g.spec.dilation);
    let npos = g.positions();
    for c in 0..g.c_in {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oy in 0..g.oh {
                    let iy = (oy * s + ki * d) as isize - p as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kj * d) as isize - p as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let (k, s, p, d) = (g.k, g.spec.stride, g.spec.padding, g.spec.dilation);
    let npos = g.positions();
    for c in 0..g.c_in {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * npos..(row + 1) * npos];
                for oy in 0..g.oh {
                    let iy = (oy * s + ki * d) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * s + kj * d) as isize - p as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (rows, npos) = (g.col_rows(), g.positions());
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * npos;
    let mut out = vec![T::zero(); g.batch * out_stride];
    let mut cols = vec![T::zero(); rows * npos];
    for n in 0..g.batch {
        im2col(g, &x[n * in_stride..(n + 1) * in_stride], &mut cols);
        let dst = &mut out[n * out_stride..(n + 1) * out_stride];
        gemm(false, false, g.c_out, npos, rows, w, &cols, T::zero(), dst);
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut dst[co * npos..(co + 1) * npos] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Gradients of a convolution given the upstream gradient `gout`. Each
/// requested buffer is accumulated into.
pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (rows, npos) = (g.col_rows(), g.positions());
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * npos;
    if let Some(db) = db {
        for n in 0..g.batch {
            let go = &gout[n * out_stride..(n + 1) * out_stride];
            for (co, b) in db.iter_mut().enumerate() {
                *b += go[co * npos..(co + 1) * npos].iter().copied().sum::<T>();
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    let mut cols = vec![T::zero(); rows * npos];
    let mut dx = dx;
    let mut dw = dw;
    for n in 0..g.batch {
        let go = &gout[n * out_stride..(n + 1) * out_stride];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(g, &x[n * in_stride..(n + 1) * in_stride], &mut cols);
            gemm(false, true, g.c_out, rows, npos, go, &cols, T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(true, false, rows, npos, g.c_out, w, go, T::zero(), &mut cols);
            col2im_add(g, &cols, &mut dx[n * in_stride..(n + 1) * in_stride]);
        }
    }
}
