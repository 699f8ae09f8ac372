//! The dual-branch network.
//!
//! Upper branch: `WRN(DN(x))`, denoising then watermark removal.
//! Lower branch: `DW2(DW1(x) ⊙ g₁) ⊙ g₂` with `g₁ = gate₁(DN(x))` and
//! `g₂ = gate₂(WRN(DN(x)))`. The fused output is
//! `LeakyReLU(conv3×3(concat(upper, lower)))`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::image::{batch_to_tensor, tensor_to_image, Image};
use crate::model::config::ModelConfig;
use crate::model::gate::{GateTrace, InteractionGate};
use crate::model::iunet::{IUNet, IUNetTrace};
use crate::nn::{join, Conv2d, ConvGraph};
use crate::ops::{
    concat_channels, leaky_relu, leaky_relu_backward_inplace, scale_channels, scale_channels_backward,
    split_channels,
};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Pslnet<T> {
    pub config: ModelConfig,
    pub dn: IUNet<T>,
    pub wrn: IUNet<T>,
    pub dw1: IUNet<T>,
    pub dw2: IUNet<T>,
    pub interaction1: InteractionGate<T>,
    pub interaction2: InteractionGate<T>,
    pub em: Conv2d<T>,
}

/// Structural switches used for the ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    /// When off, both interaction gates are exactly 1.
    pub interactions: bool,
    /// When off, the fused output is the lower-branch output.
    pub enhancement: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            interactions: true,
            enhancement: true,
        }
    }
}

#[derive(Debug, Clone)]
struct PslnetTrace<T> {
    dn: IUNetTrace<T>,
    wrn: IUNetTrace<T>,
    dw1: IUNetTrace<T>,
    dw2: IUNetTrace<T>,
    gate1: Option<GateTrace<T>>,
    gate2: Option<GateTrace<T>>,
    dw1_out: Tensor<T>,
    dw2_out: Tensor<T>,
    em: Option<(Tensor<T>, Tensor<T>)>,
}

/// Batched forward result, `[3, N, H, W]` tensors, plus what the backward
/// pass needs.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub dn_out: Tensor<T>,
    pub upper: Tensor<T>,
    pub lower: Tensor<T>,
    pub fused: Tensor<T>,
    /// `[3, N, 1, 1]` gate values.
    pub gate1: Tensor<T>,
    pub gate2: Tensor<T>,
    pub ablation: Ablation,
    trace: PslnetTrace<T>,
}

/// Loss gradients with respect to the three supervised outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads<T> {
    pub dn_out: Tensor<T>,
    pub upper: Tensor<T>,
    pub fused: Tensor<T>,
}

/// Single-image outputs of [`Pslnet::infer`].
#[derive(Debug, Clone, PartialEq)]
pub struct PslnetOutput {
    pub upper: Image,
    pub lower: Image,
    pub fused: Image,
    pub intermediates: Option<BTreeMap<String, Vec<f32>>>,
}

impl<T: Real> Pslnet<T> {
    /// All-zero weights.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            dn: IUNet::new(&config),
            wrn: IUNet::new(&config),
            dw1: IUNet::new(&config),
            dw2: IUNet::new(&config),
            interaction1: InteractionGate::new(config.interaction_hidden),
            interaction2: InteractionGate::new(config.interaction_hidden),
            em: Conv2d::zeros(6, 3, 3),
            config,
        })
    }

    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut net = Self::new(config)?;
        net.init_he(seed);
        Ok(net)
    }

    pub fn zeros_like(&self) -> Self {
        Self::new(self.config.clone()).expect("config already validated")
    }

    pub fn cast<U: Real>(&self) -> Pslnet<U> {
        let mut out = Pslnet::<U>::new(self.config.clone()).expect("config already validated");
        let src = self.named_params();
        let mut i = 0;
        out.for_each_param_mut(&mut |_, t| {
            *t = src[i].1.cast();
            i += 1;
        });
        out
    }

    pub fn forward(&self, x: &Tensor<T>, ablation: Ablation) -> Result<ForwardPass<T>> {
        if x.shape().len() != 4 || x.shape()[0] != 3 {
            return Err(Error::Shape(format!("expected [3, N, H, W] input, got {:?}", x.shape())));
        }
        let (_, n, h, w) = x.dims4();
        self.config.check_input(h, w)?;

        let (dn_out, t_dn) = self.dn.forward(x);
        let (upper, t_wrn) = self.wrn.forward(&dn_out);
        let (dw1_out, t_dw1) = self.dw1.forward(x);
        let ones = || Tensor::filled(&[3, n, 1, 1], T::one());
        let (gate1, tg1) = if ablation.interactions {
            let (g, t) = self.interaction1.forward(&dn_out);
            (g, Some(t))
        } else {
            (ones(), None)
        };
        let gated = scale_channels(&dw1_out, &gate1);
        let (dw2_out, t_dw2) = self.dw2.forward(&gated);
        let (gate2, tg2) = if ablation.interactions {
            let (g, t) = self.interaction2.forward(&upper);
            (g, Some(t))
        } else {
            (ones(), None)
        };
        let lower = scale_channels(&dw2_out, &gate2);
        let (fused, em) = if ablation.enhancement {
            let cat = concat_channels(&upper, &lower);
            let pre = self.em.forward(&cat);
            (leaky_relu(&pre, T::lit(self.config.leaky_slope as f64)), Some((cat, pre)))
        } else {
            (lower.clone(), None)
        };
        Ok(ForwardPass {
            dn_out,
            upper,
            lower,
            fused,
            gate1,
            gate2,
            ablation,
            trace: PslnetTrace {
                dn: t_dn,
                wrn: t_wrn,
                dw1: t_dw1,
                dw2: t_dw2,
                gate1: tg1,
                gate2: tg2,
                dw1_out,
                dw2_out,
                em,
            },
        })
    }

    /// Backpropagates output gradients. Weight gradients accumulate into
    /// `grad`; returns the gradient with respect to the input batch.
    pub fn backward(&self, fwd: &ForwardPass<T>, dout: &OutputGrads<T>, grad: &mut Pslnet<T>) -> Tensor<T> {
        let tr = &fwd.trace;
        let mut d_upper = dout.upper.clone();
        let mut d_dn = dout.dn_out.clone();

        let d_lower = match &tr.em {
            Some((cat, pre)) => {
                let mut dpre = dout.fused.clone();
                leaky_relu_backward_inplace(&mut dpre, pre, T::lit(self.config.leaky_slope as f64));
                let dcat = self.em.backward(cat, &dpre, Some(&mut grad.em), true).expect("dx");
                let (du, dl) = split_channels(&dcat, 3);
                d_upper.add_assign(&du);
                dl
            }
            None => dout.fused.clone(),
        };

        let (d_dw2_out, d_gate2) = scale_channels_backward(&d_lower, &tr.dw2_out, &fwd.gate2);
        if let Some(tg2) = &tr.gate2 {
            d_upper.add_assign(&self.interaction2.backward(tg2, &d_gate2, Some(&mut grad.interaction2)));
        }
        let d_gated = self.dw2.backward(&tr.dw2, &d_dw2_out, Some(&mut grad.dw2));
        let (d_dw1_out, d_gate1) = scale_channels_backward(&d_gated, &tr.dw1_out, &fwd.gate1);
        if let Some(tg1) = &tr.gate1 {
            d_dn.add_assign(&self.interaction1.backward(tg1, &d_gate1, Some(&mut grad.interaction1)));
        }
        let mut dx = self.dw1.backward(&tr.dw1, &d_dw1_out, Some(&mut grad.dw1));

        d_dn.add_assign(&self.wrn.backward(&tr.wrn, &d_upper, Some(&mut grad.wrn)));
        dx.add_assign(&self.dn.backward(&tr.dn, &d_dn, Some(&mut grad.dn)));
        dx
    }

    /// Single-image forward pass.
    pub fn infer(&self, input: &Image, ablation: Ablation, keep_intermediates: bool) -> Result<PslnetOutput> {
        let x = batch_to_tensor::<T>(&[input])?;
        let fwd = self.forward(&x, ablation)?;
        let intermediates = keep_intermediates.then(|| {
            let dn = tensor_to_image(&fwd.dn_out, 0);
            let to_vec = |t: &Tensor<T>| t.data().iter().map(|v| v.f64() as f32).collect::<Vec<_>>();
            BTreeMap::from([
                ("dn".to_string(), dn.data().to_vec()),
                ("gate1".to_string(), to_vec(&fwd.gate1)),
                ("gate2".to_string(), to_vec(&fwd.gate2)),
            ])
        });
        Ok(PslnetOutput {
            upper: tensor_to_image(&fwd.upper, 0),
            lower: tensor_to_image(&fwd.lower, 0),
            fused: tensor_to_image(&fwd.fused, 0),
            intermediates,
        })
    }

    /// Like [`Pslnet::infer`] for any image size: the input is reflect-padded
    /// up to the next size the network accepts and outputs are cropped back.
    pub fn infer_padded(&self, input: &Image, ablation: Ablation) -> Result<PslnetOutput> {
        let m = self.config.multiple();
        let (h, w) = input.dims();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        if (ph, pw) == (h, w) {
            return self.infer(input, ablation, false);
        }
        let out = self.infer(&input.reflect_pad(ph, pw)?, ablation, false)?;
        Ok(PslnetOutput {
            upper: out.upper.crop(0, 0, h, w)?,
            lower: out.lower.crop(0, 0, h, w)?,
            fused: out.fused.crop(0, 0, h, w)?,
            intermediates: None,
        })
    }

    /// Number of convolutions in the upper (`DN`, `WRN`) and lower
    /// (`DW1`, `DW2`) branches, counted by walking the graph.
    pub fn branch_conv_counts(&self) -> (usize, usize) {
        let names = self.conv_names();
        let count = |p: &str| names.iter().filter(|n| n.starts_with(p)).count();
        (count("upper."), count("lower."))
    }
}

impl<T: Real> ConvGraph<T> for Pslnet<T> {
    fn visit_convs<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Conv2d<T>)) {
        self.dn.visit_convs(&join(prefix, "upper.dn"), f);
        self.wrn.visit_convs(&join(prefix, "upper.wrn"), f);
        self.dw1.visit_convs(&join(prefix, "lower.dw1"), f);
        self.dw2.visit_convs(&join(prefix, "lower.dw2"), f);
        self.interaction1.visit_convs(&join(prefix, "interaction1"), f);
        self.interaction2.visit_convs(&join(prefix, "interaction2"), f);
        f(join(prefix, "em.conv"), &self.em);
    }

    fn visit_convs_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Conv2d<T>)) {
        self.dn.visit_convs_mut(&join(prefix, "upper.dn"), f);
        self.wrn.visit_convs_mut(&join(prefix, "upper.wrn"), f);
        self.dw1.visit_convs_mut(&join(prefix, "lower.dw1"), f);
        self.dw2.visit_convs_mut(&join(prefix, "lower.dw2"), f);
        self.interaction1.visit_convs_mut(&join(prefix, "interaction1"), f);
        self.interaction2.visit_convs_mut(&join(prefix, "interaction2"), f);
        f(join(prefix, "em.conv"), &mut self.em);
    }
}
