//! Forward and backward kernels on `[C, N, H, W]` activations.

use crate::tensor::{Real, Tensor};

#[cfg(test)]
/// Unfolds a "same"-padded `k×k` neighbourhood into rows of
/// `[(c·k + ky)·k + kx, n·h·w]`.
pub(crate) fn im2col<T: Real>(x: &Tensor<T>, k: usize) -> Vec<T> {
    let (c, n, h, w) = x.dims4();
    let plane = h * w;
    let nhw = n * plane;
    let mut cols = vec![T::zero(); c * k * k * nhw];
    let src = x.data();
    for_each_shift(c, k, w, |ci, row, dy, x0, x1, sx0| {
        let dst = &mut cols[row * nhw..(row + 1) * nhw];
        for b in 0..n {
            let sp = &src[(ci * n + b) * plane..][..plane];
            for yo in 0..h {
                let ys = yo as isize + dy;
                if ys < 0 || ys >= h as isize || x0 >= x1 {
                    continue;
                }
                let srow = &sp[ys as usize * w..][..w];
                dst[b * plane + yo * w + x0..b * plane + yo * w + x1]
                    .copy_from_slice(&srow[sx0..sx0 + (x1 - x0)]);
            }
        }
    });
    cols
}

#[cfg(test)]
/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im<T: Real>(cols: &[T], c: usize, n: usize, h: usize, w: usize, k: usize) -> Tensor<T> {
    let plane = h * w;
    let nhw = n * plane;
    let mut out = Tensor::zeros(&[c, n, h, w]);
    let dst = out.data_mut();
    for_each_shift(c, k, w, |ci, row, dy, x0, x1, sx0| {
        let src = &cols[row * nhw..(row + 1) * nhw];
        for b in 0..n {
            let dp = &mut dst[(ci * n + b) * plane..][..plane];
            for yo in 0..h {
                let ys = yo as isize + dy;
                if ys < 0 || ys >= h as isize || x0 >= x1 {
                    continue;
                }
                let drow = &mut dp[ys as usize * w..][..w];
                let s = &src[b * plane + yo * w + x0..b * plane + yo * w + x1];
                for (d, &v) in drow[sx0..sx0 + (x1 - x0)].iter_mut().zip(s) {
                    *d += v;
                }
            }
        }
    });
    out
}

/// [`im2col`] restricted to output rows `y0..y1` of image `b`: fills `out`
/// with `[c·k·k, (y1 − y0)·w]`.
pub(crate) fn im2col_band<T: Real>(x: &Tensor<T>, k: usize, b: usize, y0: usize, y1: usize, out: &mut [T]) {
    let (c, n, h, w) = x.dims4();
    let plane = h * w;
    let cols = (y1 - y0) * w;
    let src = x.data();
    out[..c * k * k * cols].fill(T::zero());
    for_each_shift(c, k, w, |ci, row, dy, x0, x1, sx0| {
        if x0 >= x1 {
            return;
        }
        let dst = &mut out[row * cols..(row + 1) * cols];
        let sp = &src[(ci * n + b) * plane..][..plane];
        for yo in y0..y1 {
            let ys = yo as isize + dy;
            if ys < 0 || ys >= h as isize {
                continue;
            }
            let srow = &sp[ys as usize * w..][..w];
            let o = (yo - y0) * w;
            dst[o + x0..o + x1].copy_from_slice(&srow[sx0..sx0 + (x1 - x0)]);
        }
    });
}

/// Adjoint of [`im2col_band`]: adds the band's column gradients into `dst`.
pub(crate) fn col2im_band<T: Real>(cols_buf: &[T], dst: &mut Tensor<T>, k: usize, b: usize, y0: usize, y1: usize) {
    let (c, n, h, w) = dst.dims4();
    let plane = h * w;
    let cols = (y1 - y0) * w;
    let data = dst.data_mut();
    for_each_shift(c, k, w, |ci, row, dy, x0, x1, sx0| {
        if x0 >= x1 {
            return;
        }
        let src = &cols_buf[row * cols..(row + 1) * cols];
        let dp = &mut data[(ci * n + b) * plane..][..plane];
        for yo in y0..y1 {
            let ys = yo as isize + dy;
            if ys < 0 || ys >= h as isize {
                continue;
            }
            let drow = &mut dp[ys as usize * w..][..w];
            let o = (yo - y0) * w;
            for (d, &v) in drow[sx0..sx0 + (x1 - x0)].iter_mut().zip(&src[o + x0..o + x1]) {
                *d += v;
            }
        }
    });
}

/// Calls `f(ci, row, dy, x0, x1, sx0)` for each kernel tap: output columns
/// `x0..x1` read source columns starting at `sx0`.
fn for_each_shift(
    c: usize,
    k: usize,
    w: usize,
    mut f: impl FnMut(usize, usize, isize, usize, usize, usize),
) {
    let pad = (k / 2) as isize;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
                let sx0 = (x0 as isize + dx).max(0) as usize;
                f(ci, row, dy, x0, x1, sx0);
            }
        }
    }
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `dy` wherever the ReLU output was not positive.
pub fn relu_backward_inplace<T: Real>(dy: &mut Tensor<T>, out: &Tensor<T>) {
    for (g, &o) in dy.data_mut().iter_mut().zip(out.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}

pub fn leaky_relu_backward_inplace<T: Real>(dy: &mut Tensor<T>, pre: &Tensor<T>, slope: T) {
    for (g, &p) in dy.data_mut().iter_mut().zip(pre.data()) {
        if p <= T::zero() {
            *g *= slope;
        }
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// 2×2 max-pool with stride 2. Returns the pooled map and the argmax tap
/// (0..4, row-major within the window) of every output element.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let (c, n, h, w) = x.dims4();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, n, ho, wo]);
    let mut arg = vec![0u8; c * n * ho * wo];
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..c * n {
        let sp = &src[p * h * w..][..h * w];
        for yo in 0..ho {
            for xo in 0..wo {
                let base = 2 * yo * w + 2 * xo;
                let taps = [sp[base], sp[base + 1], sp[base + w], sp[base + w + 1]];
                let mut best = 0;
                for t in 1..4 {
                    if taps[t] > taps[best] {
                        best = t;
                    }
                }
                let o = p * ho * wo + yo * wo + xo;
                dst[o] = taps[best];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Real>(dy: &Tensor<T>, arg: &[u8], h: usize, w: usize) -> Tensor<T> {
    let (c, n, ho, wo) = dy.dims4();
    let mut dx = Tensor::zeros(&[c, n, h, w]);
    let g = dy.data();
    let d = dx.data_mut();
    for p in 0..c * n {
        for yo in 0..ho {
            for xo in 0..wo {
                let o = p * ho * wo + yo * wo + xo;
                let t = arg[o] as usize;
                let (ty, tx) = (t / 2, t % 2);
                d[p * h * w + (2 * yo + ty) * w + 2 * xo + tx] += g[o];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, n, h, w) = x.dims4();
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[c, n, ho, wo]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..c * n {
        for y in 0..ho {
            let srow = &src[p * h * w + (y / 2) * w..][..w];
            let drow = &mut dst[p * ho * wo + y * wo..][..wo];
            for (xo, d) in drow.iter_mut().enumerate() {
                *d = srow[xo / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (c, n, ho, wo) = dy.dims4();
    let (h, w) = (ho / 2, wo / 2);
    let mut dx = Tensor::zeros(&[c, n, h, w]);
    let g = dy.data();
    let d = dx.data_mut();
    for p in 0..c * n {
        for y in 0..ho {
            for x in 0..wo {
                d[p * h * w + (y / 2) * w + x / 2] += g[p * ho * wo + y * wo + x];
            }
        }
    }
    dx
}

/// Channel concatenation; in `[C, N, H, W]` layout this is a buffer append.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (ca, n, h, w) = a.dims4();
    let (cb, nb, hb, wb) = b.dims4();
    assert_eq!((n, h, w), (nb, hb, wb), "concat spatial/batch mismatch");
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, n, h, w], data).expect("concat shape")
}

/// Inverse of [`concat_channels`] for gradients: first `ca` channels, rest.
pub fn split_channels<T: Real>(x: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let (c, n, h, w) = x.dims4();
    let cut = ca * n * h * w;
    let a = Tensor::from_vec(&[ca, n, h, w], x.data()[..cut].to_vec()).expect("split shape");
    let b = Tensor::from_vec(&[c - ca, n, h, w], x.data()[cut..].to_vec()).expect("split shape");
    (a, b)
}

/// Multiplies every `(c, n)` plane of `x` by `gate[c, n]`.
pub fn scale_channels<T: Real>(x: &Tensor<T>, gate: &Tensor<T>) -> Tensor<T> {
    let (c, n, h, w) = x.dims4();
    assert_eq!(gate.len(), c * n, "gate must hold one value per (channel, sample)");
    let mut out = x.clone();
    let plane = h * w;
    for (p, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let g = gate.data()[p];
        chunk.iter_mut().for_each(|v| *v *= g);
    }
    out
}

/// Gradients of [`scale_channels`] with respect to `x` and `gate`.
pub fn scale_channels_backward<T: Real>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    gate: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let dx = scale_channels(dy, gate);
    let (c, n, h, w) = x.dims4();
    let plane = h * w;
    let mut dg = Tensor::zeros(gate.shape());
    for p in 0..c * n {
        let mut acc = T::zero();
        for (g, v) in dy.data()[p * plane..][..plane].iter().zip(&x.data()[p * plane..][..plane]) {
            acc += *g * *v;
        }
        dg.data_mut()[p] = acc;
    }
    (dx, dg)
}

/// Spatial mean of every `(c, n)` plane, shaped `[C, N, 1, 1]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, n, h, w) = x.dims4();
    let plane = h * w;
    let inv = T::one() / T::lit(plane as f64);
    let data = x
        .data()
        .chunks(plane)
        .map(|chunk| chunk.iter().fold(T::zero(), |a, &b| a + b) * inv)
        .collect();
    Tensor::from_vec(&[c, n, 1, 1], data).expect("pool shape")
}

pub fn global_avg_pool_backward<T: Real>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (c, n, _, _) = dy.dims4();
    let plane = h * w;
    let inv = T::one() / T::lit(plane as f64);
    let mut dx = Tensor::zeros(&[c, n, h, w]);
    for (p, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
        let g = dy.data()[p] * inv;
        chunk.iter_mut().for_each(|v| *v = g);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize]) -> Tensor<f64> {
        let len = shape.iter().product::<usize>();
        Tensor::from_vec(shape, (0..len).map(|i| ((i * 37) % 11) as f64 - 5.0).collect()).unwrap()
    }

    #[test]
    fn bands_tile_the_full_unfold() {
        let x = seq(&[2, 3, 5, 4]);
        let (n, h, w) = (3, 5, 4);
        let full = im2col(&x, 3);
        let nhw = n * h * w;
        let probe = seq(&[18, n, h, w]);
        let mut back = Tensor::zeros(x.shape());
        for b in 0..n {
            for (y0, y1) in [(0, 2), (2, 3), (3, 5)] {
                let cols = (y1 - y0) * w;
                let mut buf = vec![7.0; 18 * cols];
                im2col_band(&x, 3, b, y0, y1, &mut buf);
                let mut pbuf = vec![0.0; 18 * cols];
                for r in 0..18 {
                    let off = r * nhw + b * h * w + y0 * w;
                    assert_eq!(&buf[r * cols..(r + 1) * cols], &full[off..off + cols]);
                    pbuf[r * cols..(r + 1) * cols].copy_from_slice(&probe.data()[off..off + cols]);
                }
                col2im_band(&pbuf, &mut back, 3, b, y0, y1);
            }
        }
        assert_eq!(back, col2im(probe.data(), 2, n, h, w, 3));
    }

    #[test]
    fn im2col_centre_tap_is_identity() {
        let x = seq(&[2, 2, 5, 3]);
        let cols = im2col(&x, 3);
        let nhw = 2 * 5 * 3;
        for ci in 0..2 {
            let row = (ci * 3 + 1) * 3 + 1;
            assert_eq!(&cols[row * nhw..(row + 1) * nhw], &x.data()[ci * nhw..(ci + 1) * nhw]);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let x = seq(&[3, 2, 4, 5]);
        let cols = im2col(&x, 3);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, 3, 2, 4, 5, 3);
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn pool_then_unpool_routes_gradient_to_max() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.data(), &[4.0]);
        let dx = max_pool2_backward(&Tensor::filled(&[1, 1, 1, 1], 1.0), &arg, 2, 2);
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let x = seq(&[1, 1, 2, 2]);
        let up = upsample2(&x);
        assert_eq!(up.shape(), &[1, 1, 4, 4]);
        let dx = upsample2_backward(&Tensor::filled(&[1, 1, 4, 4], 1.0));
        assert!(dx.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn concat_split_round_trip() {
        let a = seq(&[2, 3, 2, 2]);
        let b = seq(&[1, 3, 2, 2]);
        let (a2, b2) = split_channels(&concat_channels(&a, &b), 2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }
}
