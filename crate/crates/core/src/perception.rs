//! Frozen four-layer texture feature extractor used by the texture loss.
//!
//! conv+ReLU (3→64), conv+ReLU (64→64), 2×2 max-pool, conv+ReLU (64→128),
//! conv+ReLU (128→128). Features are taken after the last ReLU. The type
//! exposes no mutable access to its weights and no weight gradients, so
//! training cannot change it.

use std::path::Path;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::image::{batch_to_tensor, Image};
use crate::nn::Conv2d;
use crate::ops::{max_pool2, max_pool2_backward, relu_backward_inplace, relu_inplace};
use crate::rng::derive_seed;
use crate::tensor::{Real, Tensor};

pub const PN_WIDTHS: [usize; 4] = [64, 64, 128, 128];

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionNet<T> {
    convs: [Conv2d<T>; 4],
}

#[derive(Debug, Clone)]
pub struct PerceptionTrace<T> {
    inputs: [Tensor<T>; 4],
    outputs: [Tensor<T>; 4],
    pool: Vec<u8>,
}

fn layer_shapes() -> [(usize, usize); 4] {
    [(3, PN_WIDTHS[0]), (PN_WIDTHS[0], PN_WIDTHS[1]), (PN_WIDTHS[1], PN_WIDTHS[2]), (PN_WIDTHS[2], PN_WIDTHS[3])]
}

impl<T: Real> PerceptionNet<T> {
    pub fn zeros() -> Self {
        Self {
            convs: layer_shapes().map(|(i, o)| Conv2d::zeros(i, o, 3)),
        }
    }

    /// Fixed-seed He initialisation, used when no weight file is supplied.
    pub fn seeded(seed: u64) -> Self {
        let mut net = Self::zeros();
        for (i, conv) in net.convs.iter_mut().enumerate() {
            conv.init_he(derive_seed(seed, i as u64, "pn"));
        }
        net
    }

    /// Loads `pn.conv{1..4}.{weight,bias}` from a checkpoint container.
    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let mut net = Self::zeros();
        for (i, conv) in net.convs.iter_mut().enumerate() {
            for (suffix, t) in [("weight", &mut conv.weight), ("bias", &mut conv.bias)] {
                let name = format!("pn.conv{}.{suffix}", i + 1);
                let data = c
                    .tensor(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing {name}")))?;
                if data.len() != t.len() {
                    return Err(Error::Checkpoint(format!(
                        "{name}: expected {} values, found {}",
                        t.len(),
                        data.len()
                    )));
                }
                *t = Tensor::from_vec(t.shape(), data.iter().map(|&v| T::lit(v as f64)).collect())?;
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(serde_json::json!({ "format_version": 1, "kind": "perception" }));
        for (name, t) in self.named_params() {
            c.insert(name, t.data().iter().map(|v| v.f64() as f32).collect());
        }
        c.write(path)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.convs
            .iter()
            .enumerate()
            .flat_map(|(i, c)| {
                [
                    (format!("pn.conv{}.weight", i + 1), &c.weight),
                    (format!("pn.conv{}.bias", i + 1), &c.bias),
                ]
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> PerceptionNet<U> {
        PerceptionNet {
            convs: [0, 1, 2, 3].map(|i| self.convs[i].cast()),
        }
    }

    /// `[128, N, H/2, W/2]` features of a `[3, N, H, W]` batch.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, PerceptionTrace<T>)> {
        if x.shape().len() != 4 || x.shape()[0] != 3 {
            return Err(Error::Shape(format!("perception input must be [3, N, H, W], got {:?}", x.shape())));
        }
        let (_, _, h, w) = x.dims4();
        if h < 4 || w < 4 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("perception input {h}x{w} must be even and >= 4")));
        }
        let conv_relu = |conv: &Conv2d<T>, x: &Tensor<T>| {
            let mut y = conv.forward(x);
            relu_inplace(&mut y);
            y
        };
        let a1 = conv_relu(&self.convs[0], x);
        let a2 = conv_relu(&self.convs[1], &a1);
        let (p, pool) = max_pool2(&a2);
        let a3 = conv_relu(&self.convs[2], &p);
        let a4 = conv_relu(&self.convs[3], &a3);
        let trace = PerceptionTrace {
            inputs: [x.clone(), a1.clone(), p, a3.clone()],
            outputs: [a1, a2, a3, a4.clone()],
            pool,
        };
        Ok((a4, trace))
    }

    /// Gradient with respect to the input image only.
    pub fn backward_input(&self, trace: &PerceptionTrace<T>, dfeat: &Tensor<T>) -> Tensor<T> {
        let mut g = dfeat.clone();
        for i in [3, 2] {
            relu_backward_inplace(&mut g, &trace.outputs[i]);
            g = self.convs[i].backward(&trace.inputs[i], &g, None, true).expect("dx");
        }
        let (_, _, h, w) = trace.outputs[1].dims4();
        g = max_pool2_backward(&g, &trace.pool, h, w);
        for i in [1, 0] {
            relu_backward_inplace(&mut g, &trace.outputs[i]);
            g = self.convs[i].backward(&trace.inputs[i], &g, None, true).expect("dx");
        }
        g
    }

    pub fn extract_features(&self, img: &Image) -> Result<Tensor<T>> {
        Ok(self.forward(&batch_to_tensor(&[img])?)?.0)
    }
}
