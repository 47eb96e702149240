use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Per-output-index source taps along one axis (align-corners-false).
pub(crate) fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = if i0 == i1 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

pub(crate) struct Resize {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Resize {
    pub fn forward<T: Real>(&self, x: &[T]) -> Vec<T> {
        let ty = axis_taps(self.h, self.oh);
        let tx = axis_taps(self.w, self.ow);
        let mut out = vec![T::zero(); self.planes * self.oh * self.ow];
        for p in 0..self.planes {
            let src = &x[p * self.h * self.w..(p + 1) * self.h * self.w];
            let dst = &mut out[p * self.oh * self.ow..(p + 1) * self.oh * self.ow];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::from_f64_lossy(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::from_f64_lossy(fx);
                    let top = src[y0 * self.w + x0] * (T::one() - fx) + src[y0 * self.w + x1] * fx;
                    let bot = src[y1 * self.w + x0] * (T::one() - fx) + src[y1 * self.w + x1] * fx;
                    dst[oy * self.ow + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        out
    }

    pub fn backward<T: Real>(&self, gout: &[T], dx: &mut [T]) {
        let ty = axis_taps(self.h, self.oh);
        let tx = axis_taps(self.w, self.ow);
        for p in 0..self.planes {
            let g = &gout[p * self.oh * self.ow..(p + 1) * self.oh * self.ow];
            let dst = &mut dx[p * self.h * self.w..(p + 1) * self.h * self.w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::from_f64_lossy(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::from_f64_lossy(fx);
                    let gv = g[oy * self.ow + ox];
                    let (one_x, one_y) = (T::one() - fx, T::one() - fy);
                    dst[y0 * self.w + x0] += gv * one_y * one_x;
                    dst[y0 * self.w + x1] += gv * one_y * fx;
                    dst[y1 * self.w + x0] += gv * fy * one_x;
                    dst[y1 * self.w + x1] += gv * fy * fx;
                }
            }
        }
    }
}

/// Bilinear resize of the trailing two axes, outside any tape.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize", format!("input {:?} to {}x{}", x.shape(), out_h, out_w)));
    }
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    if h == 0 || w == 0 {
        return Err(Error::shape("bilinear_resize", "empty spatial extent"));
    }
    let planes = x.numel() / (h * w);
    let rs = Resize { planes, h, w, oh: out_h, ow: out_w };
    let mut shape = x.shape().to_vec();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    Tensor::new(shape, rs.forward(x.data()))
}
