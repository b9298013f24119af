//! Convolution kernels: im2col lowering onto a strided GEMM.

use super::{Real, Tensor};
use crate::error::{config_err, shape_err, Result};

#[inline]
pub fn conv_output_size(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new<T: Real>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        let [n, c_in, h, wd] = x.dims();
        let [c_out, cg, k, k2] = w.dims();
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(config_err!(
                "groups {groups} must divide input channels {c_in} and output channels {c_out}"
            ));
        }
        if k != k2 || k % 2 == 0 {
            return Err(config_err!(
                "kernel must be square with odd size, got {k}x{k2}"
            ));
        }
        if !(1..=2).contains(&stride) {
            return Err(config_err!("stride must be 1 or 2, got {stride}"));
        }
        if cg != c_in / groups {
            return Err(shape_err!(
                "kernel expects {cg} input channels per group, input has {} ({} / {groups})",
                c_in / groups,
                c_in
            ));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err!(
                "input {h}x{wd} smaller than kernel {k} with pad {pad}"
            ));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad,
            groups,
            ho: conv_output_size(h, k, stride, pad),
            wo: conv_output_size(wd, k, stride, pad),
        })
    }

    #[inline]
    fn cg(&self) -> usize {
        self.c_in / self.groups
    }

    #[inline]
    fn cog(&self) -> usize {
        self.c_out / self.groups
    }

    #[inline]
    fn rows(&self) -> usize {
        self.cg() * self.k * self.k
    }

    #[inline]
    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    #[inline]
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Lowers the input channels of one group of one sample into a
/// `(cg*K*K) x (Ho*Wo)` column matrix.
fn im2col<T: Real>(g: &ConvGeom, src: &[T], cols: &mut [T]) {
    let (k, s, pad) = (g.k, g.stride, g.pad as isize);
    let p = g.pixels();
    for ci in 0..g.cg() {
        let plane = &src[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize + ky as isize - pad;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - pad;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], dst: &mut [T]) {
    let (k, s, pad) = (g.k, g.stride, g.pad as isize);
    let p = g.pixels();
    for ci in 0..g.cg() {
        let plane = &mut dst[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let col = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * s) as isize + kx as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + col[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D convolution. `w` is `(C_out, C_in/groups, K, K)`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, w, stride, pad, groups)?;
    if let Some(b) = bias {
        if b.numel() != g.c_out {
            return Err(shape_err!(
                "bias has {} values for {} channels",
                b.numel(),
                g.c_out
            ));
        }
    }
    let mut out = Tensor::zeros([g.n, g.c_out, g.ho, g.wo]);
    let (rows, p, cg, cog) = (g.rows(), g.pixels(), g.cg(), g.cog());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * p]
    };
    let in_per_sample = g.c_in * g.h * g.w;
    let out_per_sample = g.c_out * p;
    for n in 0..g.n {
        let xs = &x.data()[n * in_per_sample..(n + 1) * in_per_sample];
        let os = &mut out.data_mut()[n * out_per_sample..(n + 1) * out_per_sample];
        for grp in 0..g.groups {
            let src = &xs[grp * cg * g.h * g.w..(grp + 1) * cg * g.h * g.w];
            let b_mat: &[T] = if g.is_pointwise() {
                src
            } else {
                im2col(&g, src, &mut cols);
                &cols
            };
            let wg = &w.data()[grp * cog * rows..(grp + 1) * cog * rows];
            let og = &mut os[grp * cog * p..(grp + 1) * cog * p];
            T::gemm(
                cog,
                rows,
                p,
                T::one(),
                wg,
                rows as isize,
                1,
                b_mat,
                p as isize,
                1,
                T::zero(),
                og,
                p as isize,
                1,
            );
        }
        if let Some(b) = bias {
            for (co, plane) in os.chunks_mut(p).enumerate() {
                let bv = b.data()[co];
                plane.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Ok(out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    stride: usize,
    pad: usize,
    groups: usize,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x, w, stride, pad, groups)?;
    let (rows, p, cg, cog) = (g.rows(), g.pixels(), g.cg(), g.cog());
    let [need_dx, need_dw, need_db] = need;
    let mut dx = need_dx.then(|| Tensor::zeros(x.dims()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.dims()));
    let mut db = need_db.then(|| Tensor::zeros([g.c_out, 1, 1, 1]));
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * p }];
    let mut dcols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * p }];
    let in_per_sample = g.c_in * g.h * g.w;
    let out_per_sample = g.c_out * p;
    let plane_in = cg * g.h * g.w;
    for n in 0..g.n {
        let xs = &x.data()[n * in_per_sample..(n + 1) * in_per_sample];
        let ds = &dout.data()[n * out_per_sample..(n + 1) * out_per_sample];
        for grp in 0..g.groups {
            let dog = &ds[grp * cog * p..(grp + 1) * cog * p];
            let wg = &w.data()[grp * cog * rows..(grp + 1) * cog * rows];
            let src = &xs[grp * plane_in..(grp + 1) * plane_in];
            if let Some(dw) = dw.as_mut() {
                let b_mat: &[T] = if g.is_pointwise() {
                    src
                } else {
                    im2col(&g, src, &mut cols);
                    &cols
                };
                let dwg = &mut dw.data_mut()[grp * cog * rows..(grp + 1) * cog * rows];
                // dW (cog x rows) += dOut (cog x p) * cols^T (p x rows)
                T::gemm(
                    cog,
                    p,
                    rows,
                    T::one(),
                    dog,
                    p as isize,
                    1,
                    b_mat,
                    1,
                    p as isize,
                    T::one(),
                    dwg,
                    rows as isize,
                    1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx.data_mut()[n * in_per_sample..(n + 1) * in_per_sample];
                let dst = &mut dxs[grp * plane_in..(grp + 1) * plane_in];
                // dcols (rows x p) = W^T (rows x cog) * dOut (cog x p)
                if g.is_pointwise() {
                    T::gemm(
                        rows,
                        cog,
                        p,
                        T::one(),
                        wg,
                        1,
                        rows as isize,
                        dog,
                        p as isize,
                        1,
                        T::one(),
                        dst,
                        p as isize,
                        1,
                    );
                } else {
                    T::gemm(
                        rows,
                        cog,
                        p,
                        T::one(),
                        wg,
                        1,
                        rows as isize,
                        dog,
                        p as isize,
                        1,
                        T::zero(),
                        &mut dcols,
                        p as isize,
                        1,
                    );
                    col2im_add(&g, &dcols, dst);
                }
            }
        }
        if let Some(db) = db.as_mut() {
            for (co, plane) in ds.chunks(p).enumerate() {
                let s: T = plane.iter().copied().sum();
                db.data_mut()[co] = db.data_mut()[co] + s;
            }
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &[f64],
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Tensor<f64> {
        let [n, c_in, h, wd] = x.dims();
        let [c_out, cg, k, _] = w.dims();
        let ho = conv_output_size(h, k, stride, pad);
        let wo = conv_output_size(wd, k, stride, pad);
        let cog = c_out / groups;
        Tensor::from_fn([n, c_out, ho, wo], |[ni, co, oy, ox]| {
            let grp = co / cog;
            let mut acc = b[co];
            for ci in 0..cg {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w.at(co, ci, ky, kx)
                                * x.at(ni, grp * cg + ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            let _ = c_in;
            acc
        })
    }

    fn pseudo(dims: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(dims, |_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    #[test]
    fn matches_naive_loops() {
        for &(c_in, c_out, k, stride, pad, groups) in &[
            (4, 8, 3, 1, 1, 1),
            (8, 8, 3, 2, 1, 4),
            (6, 4, 1, 1, 0, 2),
            (3, 3, 5, 2, 2, 3),
            (4, 2, 3, 1, 0, 1),
        ] {
            let x = pseudo([2, c_in, 9, 7], 1);
            let w = pseudo([c_out, c_in / groups, k, k], 2);
            let b = pseudo([c_out, 1, 1, 1], 3);
            let got = conv2d_forward(&x, &w, Some(&b), stride, pad, groups).unwrap();
            let want = naive_conv(&x, &w, b.data(), stride, pad, groups);
            assert_eq!(got.dims(), want.dims());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn rejects_bad_groups_and_shapes() {
        let x = Tensor::<f32>::zeros([1, 6, 5, 5]);
        let w = Tensor::<f32>::zeros([4, 3, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &w, None, 1, 1, 4),
            Err(crate::Error::Config(_))
        ));
        let w = Tensor::<f32>::zeros([4, 5, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &w, None, 1, 1, 1),
            Err(crate::Error::Shape(_))
        ));
        let w = Tensor::<f32>::zeros([4, 6, 2, 2]);
        assert!(conv2d_forward(&x, &w, None, 1, 1, 1).is_err());
    }
}
