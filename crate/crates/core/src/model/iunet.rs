//! Improved U-Net: a plain encoder/decoder whose top-level skip connection
//! carries the raw module input instead of the first encoder block's output.

use crate::model::config::ModelConfig;
use crate::nn::{join, Conv2d, ConvGraph};
use crate::ops::{
    concat_channels, max_pool2, max_pool2_backward, relu_backward_inplace, relu_inplace,
    split_channels, upsample2, upsample2_backward,
};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Stage<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IUNet<T> {
    pub enc: Vec<Stage<T>>,
    pub bottleneck: Stage<T>,
    /// Indexed by scale: `dec[0]` produces the output.
    pub dec: Vec<Stage<T>>,
}

#[derive(Debug, Clone)]
struct StageTrace<T> {
    input: Tensor<T>,
    mid: Tensor<T>,
    out: Tensor<T>,
}

/// Activations kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct IUNetTrace<T> {
    enc: Vec<StageTrace<T>>,
    pools: Vec<Vec<u8>>,
    bottleneck: StageTrace<T>,
    dec: Vec<StageTrace<T>>,
}

fn stage<T: Real>(c_in: usize, mid: usize, c_out: usize) -> Stage<T> {
    Stage {
        conv1: Conv2d::zeros(c_in, mid, 3),
        conv2: Conv2d::zeros(mid, c_out, 3),
    }
}

impl<T: Real> IUNet<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let w = &cfg.channel_schedule;
        let d = cfg.depth;
        let enc = (0..d)
            .map(|i| stage(if i == 0 { 3 } else { w[i - 1] }, w[i], w[i]))
            .collect();
        let bottleneck = stage(w[d - 1], w[d], w[d]);
        let dec = (0..d)
            .map(|i| {
                let skip = if i == 0 { 3 } else { w[i] };
                stage(w[i + 1] + skip, w[i], if i == 0 { 3 } else { w[i] })
            })
            .collect();
        Self { enc, bottleneck, dec }
    }

    pub fn depth(&self) -> usize {
        self.enc.len()
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, IUNetTrace<T>) {
        let depth = self.depth();
        let mut enc = Vec::with_capacity(depth);
        let mut pools = Vec::with_capacity(depth);
        let mut h = x.clone();
        for st in &self.enc {
            let mut mid = st.conv1.forward(&h);
            relu_inplace(&mut mid);
            let mut out = st.conv2.forward(&mid);
            relu_inplace(&mut out);
            let (pooled, arg) = max_pool2(&out);
            pools.push(arg);
            enc.push(StageTrace { input: h, mid, out });
            h = pooled;
        }

        let mut mid = self.bottleneck.conv1.forward(&h);
        relu_inplace(&mut mid);
        let mut out = self.bottleneck.conv2.forward(&mid);
        relu_inplace(&mut out);
        let bottleneck = StageTrace { input: h, mid, out };
        let mut h = bottleneck.out.clone();

        let mut dec: Vec<Option<StageTrace<T>>> = (0..depth).map(|_| None).collect();
        for i in (0..depth).rev() {
            let skip = if i == 0 { x } else { &enc[i].out };
            let cat = concat_channels(&upsample2(&h), skip);
            let st = &self.dec[i];
            let mut mid = st.conv1.forward(&cat);
            relu_inplace(&mut mid);
            let mut out = st.conv2.forward(&mid);
            if i > 0 {
                relu_inplace(&mut out);
            }
            h = out.clone();
            dec[i] = Some(StageTrace { input: cat, mid, out });
        }
        let trace = IUNetTrace {
            enc,
            pools,
            bottleneck,
            dec: dec.into_iter().map(|t| t.expect("every scale decoded")).collect(),
        };
        (h, trace)
    }

    /// Returns the input gradient; weight gradients accumulate into `grad`.
    pub fn backward(&self, trace: &IUNetTrace<T>, dy: &Tensor<T>, mut grad: Option<&mut IUNet<T>>) -> Tensor<T> {
        let depth = self.depth();
        let mut skip_grads: Vec<Option<Tensor<T>>> = (0..depth).map(|_| None).collect();
        let mut g = dy.clone();
        for i in 0..depth {
            let st = &trace.dec[i];
            if i > 0 {
                relu_backward_inplace(&mut g, &st.out);
            }
            let (gc1, gc2) = stage_grads(grad.as_deref_mut().map(|gr| &mut gr.dec[i]));
            let mut dmid = self.dec[i].conv2.backward(&st.mid, &g, gc2, true).expect("dx");
            relu_backward_inplace(&mut dmid, &st.mid);
            let dcat = self.dec[i].conv1.backward(&st.input, &dmid, gc1, true).expect("dx");
            let up_channels = self.dec[i].conv1.in_channels() - if i == 0 { 3 } else { self.enc[i].conv2.out_channels() };
            let (dup, dskip) = split_channels(&dcat, up_channels);
            skip_grads[i] = Some(dskip);
            g = upsample2_backward(&dup);
        }

        let st = &trace.bottleneck;
        relu_backward_inplace(&mut g, &st.out);
        let (gc1, gc2) = stage_grads(grad.as_deref_mut().map(|gr| &mut gr.bottleneck));
        let mut dmid = self.bottleneck.conv2.backward(&st.mid, &g, gc2, true).expect("dx");
        relu_backward_inplace(&mut dmid, &st.mid);
        g = self.bottleneck.conv1.backward(&st.input, &dmid, gc1, true).expect("dx");

        for i in (0..depth).rev() {
            let st = &trace.enc[i];
            let (_, _, h, w) = st.out.dims4();
            let mut dout = max_pool2_backward(&g, &trace.pools[i], h, w);
            if i > 0 {
                dout.add_assign(skip_grads[i].as_ref().expect("skip grad"));
            }
            relu_backward_inplace(&mut dout, &st.out);
            let (gc1, gc2) = stage_grads(grad.as_deref_mut().map(|gr| &mut gr.enc[i]));
            let mut dmid = self.enc[i].conv2.backward(&st.mid, &dout, gc2, true).expect("dx");
            relu_backward_inplace(&mut dmid, &st.mid);
            g = self.enc[i].conv1.backward(&st.input, &dmid, gc1, true).expect("dx");
        }
        g.add_assign(skip_grads[0].as_ref().expect("top skip grad"));
        g
    }
}

fn stage_grads<T>(st: Option<&mut Stage<T>>) -> (Option<&mut Conv2d<T>>, Option<&mut Conv2d<T>>) {
    match st {
        Some(s) => (Some(&mut s.conv1), Some(&mut s.conv2)),
        None => (None, None),
    }
}

impl<T: Real> ConvGraph<T> for IUNet<T> {
    fn visit_convs<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Conv2d<T>)) {
        let mut emit = |name: String, st: &'a Stage<T>| {
            f(join(prefix, &format!("{name}.conv1")), &st.conv1);
            f(join(prefix, &format!("{name}.conv2")), &st.conv2);
        };
        for (i, st) in self.enc.iter().enumerate() {
            emit(format!("enc{i}"), st);
        }
        emit("bottleneck".into(), &self.bottleneck);
        for (i, st) in self.dec.iter().enumerate().rev() {
            emit(format!("dec{i}"), st);
        }
    }

    fn visit_convs_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Conv2d<T>)) {
        let mut emit = |name: String, st: &mut Stage<T>| {
            f(join(prefix, &format!("{name}.conv1")), &mut st.conv1);
            f(join(prefix, &format!("{name}.conv2")), &mut st.conv2);
        };
        for (i, st) in self.enc.iter_mut().enumerate() {
            emit(format!("enc{i}"), st);
        }
        emit("bottleneck".into(), &mut self.bottleneck);
        for (i, st) in self.dec.iter_mut().enumerate().rev() {
            emit(format!("dec{i}"), st);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_is_preserved() {
        let cfg = ModelConfig::with_base(4, 4);
        let mut net = IUNet::<f32>::new(&cfg);
        net.init_he(3);
        let x = Tensor::filled(&[3, 2, 64, 64], 0.5);
        let (y, _) = net.forward(&x);
        assert_eq!(y.shape(), &[3, 2, 64, 64]);
    }

    #[test]
    fn zero_network_outputs_final_bias() {
        let cfg = ModelConfig::with_base(4, 3);
        let mut net = IUNet::<f64>::new(&cfg);
        net.dec[0].conv2.bias = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.7]).unwrap();
        let x = Tensor::filled(&[3, 1, 16, 16], 0.3);
        let (y, _) = net.forward(&x);
        for c in 0..3 {
            let want = net.dec[0].conv2.bias.data()[c];
            assert!(y.data()[c * 256..(c + 1) * 256].iter().all(|&v| v == want));
        }
    }

    #[test]
    fn layout_matches_config_layer_list() {
        let cfg = ModelConfig::with_base(5, 3);
        let net = IUNet::<f32>::new(&cfg);
        let mut from_graph = Vec::new();
        net.visit_convs("", &mut |name, conv| {
            from_graph.push((name, conv.in_channels(), conv.out_channels(), conv.kernel()))
        });
        let from_cfg: Vec<_> = cfg
            .iunet_layers()
            .into_iter()
            .map(|l| (l.name, l.c_in, l.c_out, l.kernel))
            .collect();
        assert_eq!(from_graph, from_cfg);
    }
}
