//! Convolution layer and parameter traversal shared by every network here.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::ops::{col2im_band, im2col_band};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{gemm, gemm_strided, MatRef, Real, Tensor};

/// Stride-1 "same" convolution. Weight shape `[C_out, C_in, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(c_in: usize, c_out: usize, k: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[c_out, c_in, k, k]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// He (fan-in) normal init; biases zero.
    pub fn init_he(&mut self, seed: u64) {
        let fan_in = (self.in_channels() * self.kernel() * self.kernel()) as f64;
        let std = (2.0 / fan_in).sqrt();
        let mut rng = seeded(seed);
        for w in self.weight.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *w = T::lit(z * std);
        }
        self.bias.fill(T::zero());
    }

    fn fan(&self) -> usize {
        self.in_channels() * self.kernel() * self.kernel()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let (c, n, h, w) = x.dims4();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let nhw = n * h * w;
        let cout = self.out_channels();
        let mut out = Tensor::zeros(&[cout, n, h, w]);
        {
            let y = out.data_mut();
            for (co, row) in y.chunks_mut(nhw).enumerate() {
                row.fill(self.bias.data()[co]);
            }
        }
        let wmat = MatRef::row_major(self.weight.data(), cout, self.fan());
        if self.kernel() == 1 {
            gemm(T::one(), wmat, MatRef::row_major(x.data(), c, nhw), T::one(), out.data_mut());
            return out;
        }
        let fan = self.fan();
        let mut buf = vec![T::zero(); fan * band_rows(w) * w];
        for (b, y0, y1) in bands(n, h, w) {
            let cols = (y1 - y0) * w;
            im2col_band(x, self.kernel(), b, y0, y1, &mut buf);
            let off = (b * h + y0) * w;
            let bmat = MatRef::row_major(&buf[..fan * cols], fan, cols);
            gemm_strided(T::one(), wmat, bmat, T::one(), &mut out.data_mut()[off..], nhw);
        }
        out
    }

    /// Backward pass given the layer input `x` and output gradient `dy`.
    /// Weight gradients accumulate into `grad` when given; the input
    /// gradient is returned when `need_dx`.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        mut grad: Option<&mut Conv2d<T>>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let (c, n, h, w) = x.dims4();
        let nhw = n * h * w;
        let cout = self.out_channels();
        let k = self.kernel();
        let fan = self.fan();
        if let Some(g) = grad.as_deref_mut() {
            for (co, row) in dy.data().chunks(nhw).enumerate() {
                let s = row.iter().fold(T::zero(), |a, &b| a + b);
                g.bias.data_mut()[co] += s;
            }
        }
        let wt = MatRef::row_major(self.weight.data(), cout, fan).t();
        if k == 1 {
            let dymat = MatRef::row_major(dy.data(), cout, nhw);
            if let Some(g) = grad {
                let xt = MatRef::row_major(x.data(), fan, nhw).t();
                gemm(T::one(), dymat, xt, T::one(), g.weight.data_mut());
            }
            return need_dx.then(|| {
                let mut dx = Tensor::zeros(&[c, n, h, w]);
                gemm(T::one(), wt, dymat, T::zero(), dx.data_mut());
                dx
            });
        }
        let band = fan * band_rows(w) * w;
        let mut buf = vec![T::zero(); if grad.is_some() { band } else { 0 }];
        let mut dbuf = vec![T::zero(); if need_dx { band } else { 0 }];
        let mut dx = need_dx.then(|| Tensor::zeros(&[c, n, h, w]));
        for (b, y0, y1) in bands(n, h, w) {
            let cols = (y1 - y0) * w;
            let off = (b * h + y0) * w;
            let dyband = MatRef {
                data: &dy.data()[off..],
                rows: cout,
                cols,
                rs: nhw,
                cs: 1,
            };
            if let Some(g) = grad.as_deref_mut() {
                im2col_band(x, k, b, y0, y1, &mut buf);
                let colt = MatRef::row_major(&buf[..fan * cols], fan, cols).t();
                gemm(T::one(), dyband, colt, T::one(), g.weight.data_mut());
            }
            if let Some(dx) = dx.as_mut() {
                gemm(T::one(), wt, dyband, T::zero(), &mut dbuf[..fan * cols]);
                col2im_band(&dbuf, dx, k, b, y0, y1);
            }
        }
        dx
    }

    pub fn cast<U: Real>(&self) -> Conv2d<U> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Target number of columns in one unfolded band, sized so the band and
/// its GEMM operands stay in cache.
const BAND_COLS: usize = 256;

fn band_rows(w: usize) -> usize {
    (BAND_COLS / w.max(1)).max(1)
}

/// `(image, first row, end row)` bands covering an `n × h × w` batch.
fn bands(n: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    let rows = band_rows(w);
    (0..n).flat_map(move |b| (0..h).step_by(rows).map(move |y0| (b, y0, (y0 + rows).min(h))))
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// A network whose trainable state is a set of named convolutions.
pub trait ConvGraph<T: Real> {
    fn visit_convs<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Conv2d<T>));
    fn visit_convs_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Conv2d<T>));

    /// `(path, tensor)` for every weight and bias, in a fixed order.
    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_convs("", &mut |name, conv| {
            out.push((join(&name, "weight"), &conv.weight));
            out.push((join(&name, "bias"), &conv.bias));
        });
        out
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.visit_convs_mut("", &mut |name, conv| {
            f(&join(&name, "weight"), &mut conv.weight);
            f(&join(&name, "bias"), &mut conv.bias);
        });
    }

    fn conv_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit_convs("", &mut |name, _| out.push(name));
        out
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// He init of every convolution, each from a seed derived from its path
    /// so the result does not depend on traversal order.
    fn init_he(&mut self, seed: u64) {
        self.visit_convs_mut("", &mut |name, conv| {
            conv.init_he(derive_seed(seed, 0, &name));
        });
    }

    fn zero_params(&mut self) {
        self.for_each_param_mut(&mut |_, t| t.fill(T::zero()));
    }
}
