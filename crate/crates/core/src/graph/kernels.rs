//! Direct-loop kernels over NCHW buffers, generic over f32 and i32.

use std::ops::{Add, Mul};

use super::layer::{ConvAttrs, DepthwiseAttrs, PoolAttrs};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub cout: usize,
    pub groups: usize,
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl From<&ConvAttrs> for ConvGeometry {
    fn from(a: &ConvAttrs) -> Self {
        Self {
            cin: a.in_channels,
            cout: a.out_channels,
            groups: 1,
            kernel: a.kernel,
            stride: a.stride,
            padding: a.padding,
        }
    }
}

impl From<&DepthwiseAttrs> for ConvGeometry {
    fn from(a: &DepthwiseAttrs) -> Self {
        Self {
            cin: a.channels,
            cout: a.channels,
            groups: a.channels,
            kernel: a.kernel,
            stride: a.stride,
            padding: a.padding,
        }
    }
}

/// Grouped 2-D convolution. `x` is `[n, cin, h, w]`, weights are
/// `[cout, cin / groups, kh, kw]`, output is `[n, cout, oh, ow]`. Each output
/// starts from `init(co)` and accumulates in (ci, ky, kx) order; padded taps
/// contribute nothing.
pub(crate) fn conv2d<T>(
    x: &[T],
    in_shape: &[usize],
    w: &[T],
    g: ConvGeometry,
    out_hw: [usize; 2],
    init: impl Fn(usize) -> T,
) -> Vec<T>
where
    T: Copy + Add<Output = T> + Mul<Output = T>,
{
    let (n, h, wd) = (in_shape[0], in_shape[2], in_shape[3]);
    let [oh, ow] = out_hw;
    let [kh, kw] = g.kernel;
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let mut out = Vec::with_capacity(n * g.cout * oh * ow);
    for b in 0..n {
        for co in 0..g.cout {
            let group = co / cout_g;
            let w_co = &w[co * cin_g * kh * kw..(co + 1) * cin_g * kh * kw];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = init(co);
                    for cg in 0..cin_g {
                        let ci = group * cin_g + cg;
                        let x_c = &x[((b * g.cin + ci) * h) * wd..((b * g.cin + ci + 1) * h) * wd];
                        let w_c = &w_co[cg * kh * kw..(cg + 1) * kh * kw];
                        for ky in 0..kh {
                            let iy = (oy * g.stride[0] + ky) as isize - g.padding[0] as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &x_c[iy as usize * wd..(iy as usize + 1) * wd];
                            for kx in 0..kw {
                                let ix = (ox * g.stride[1] + kx) as isize - g.padding[1] as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc = acc + row[ix as usize] * w_c[ky * kw + kx];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// `y[b, o] = init(o) + sum_i x[b, i] * w[o, i]`.
pub(crate) fn fully_connected<T>(
    x: &[T],
    batch: usize,
    in_features: usize,
    w: &[T],
    out_features: usize,
    init: impl Fn(usize) -> T,
) -> Vec<T>
where
    T: Copy + Add<Output = T> + Mul<Output = T>,
{
    let mut out = Vec::with_capacity(batch * out_features);
    for b in 0..batch {
        let row = &x[b * in_features..(b + 1) * in_features];
        for o in 0..out_features {
            let wr = &w[o * in_features..(o + 1) * in_features];
            let mut acc = init(o);
            for i in 0..in_features {
                acc = acc + row[i] * wr[i];
            }
            out.push(acc);
        }
    }
    out
}

/// Windowed reduction over `[n, c, h, w]` with no padding.
pub(crate) fn pool<T: Copy, A>(
    x: &[T],
    in_shape: &[usize],
    p: &PoolAttrs,
    out_hw: [usize; 2],
    mut reduce: impl FnMut(&mut dyn Iterator<Item = T>) -> A,
) -> Vec<A> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let [oh, ow] = out_hw;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let xp = &x[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, x0) = (oy * p.stride[0], ox * p.stride[1]);
                let mut it = (0..p.kernel[0])
                    .flat_map(move |ky| (0..p.kernel[1]).map(move |kx| (y0 + ky) * w + x0 + kx))
                    .map(|i| xp[i]);
                out.push(reduce(&mut it));
            }
        }
    }
    out
}

/// Reduction over each `h * w` plane.
pub(crate) fn per_plane<T: Copy, A>(
    x: &[T],
    planes: usize,
    mut reduce: impl FnMut(&[T]) -> A,
) -> Vec<A> {
    let size = x.len() / planes;
    (0..planes)
        .map(|p| reduce(&x[p * size..(p + 1) * size]))
        .collect()
}
