//! Mixed structural/texture loss.
//!
//! `total = l_s1 + l_s2 + l_s3 + λ·(l_t1 + l_t2)` where
//! - `l_s1 = mean|DN(x) − denoise_target|`
//! - `l_s2 = mean|upper − removal_target|`
//! - `l_s3 = mean|fused − removal_target|`
//! - `l_t1 = mean|PN(upper) − PN(removal_target)|`
//! - `l_t2 = mean|PN(fused) − PN(removal_target)|`
//!
//! Both structural targets of the removal outputs are the self-supervised
//! reference, never the clean image.

use serde::{Deserialize, Serialize};

use crate::degrade::TrainingSample;
use crate::error::{Error, Result};
use crate::image::{batch_to_tensor, Image};
use crate::model::{Ablation, ForwardPass, OutputGrads, Pslnet, PslnetOutput};
use crate::perception::PerceptionNet;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossType {
    #[default]
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s1: f64,
    pub l_s2: f64,
    pub l_s3: f64,
    pub l_t1: f64,
    pub l_t2: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_s1: f64, l_s2: f64, l_s3: f64, l_t1: f64, l_t2: f64, lambda: f64) -> Self {
        Self {
            l_s1,
            l_s2,
            l_s3,
            l_t1,
            l_t2,
            lambda,
            total: l_s1 + l_s2 + l_s3 + lambda * (l_t1 + l_t2),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_s1, self.l_s2, self.l_s3, self.l_t1, self.l_t2, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Batched targets, `[3, N, H, W]`.
#[derive(Debug, Clone, Copy)]
pub struct Targets<'a, T> {
    pub denoise: &'a Tensor<T>,
    pub removal: &'a Tensor<T>,
}

/// Mean distance between `pred` and `target`; with `grad_scale` set, also
/// `grad_scale · ∂/∂pred`. The L1 subgradient at zero is zero.
fn term<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, kind: LossType, grad_scale: Option<T>) -> (f64, Option<Tensor<T>>) {
    let n = pred.len() as f64;
    let mut sum = 0.0f64;
    let mut grad = grad_scale.map(|_| pred.zeros_like());
    let step = grad_scale.map(|s| s / T::lit(n));
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        let d = p - t;
        let (value, slope) = match kind {
            LossType::L1 => {
                let s = if d > T::zero() {
                    T::one()
                } else if d < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                (d.f64().abs(), s)
            }
            LossType::L2 => (d.f64() * d.f64(), d + d),
        };
        sum += value;
        if let (Some(g), Some(step)) = (grad.as_mut(), step) {
            g.data_mut()[i] = slope * step;
        }
    }
    (sum / n, grad)
}

fn check_shapes<T: Real>(fwd: &ForwardPass<T>, targets: &Targets<'_, T>) -> Result<()> {
    let s = fwd.fused.shape();
    for (what, t) in [
        ("dn output", fwd.dn_out.shape()),
        ("upper", fwd.upper.shape()),
        ("denoise target", targets.denoise.shape()),
        ("removal target", targets.removal.shape()),
    ] {
        if t != s {
            return Err(Error::Shape(format!("{what} shape {t:?} != output shape {s:?}")));
        }
    }
    Ok(())
}

/// Loss of a forward pass and, when `want_grad`, its gradient with respect
/// to the three supervised outputs. With `lambda == 0` the texture terms
/// are skipped and reported as zero.
pub fn loss_and_output_grads<T: Real>(
    fwd: &ForwardPass<T>,
    targets: &Targets<'_, T>,
    pn: &PerceptionNet<T>,
    lambda: f64,
    kind: LossType,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<OutputGrads<T>>)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!("lambda {lambda} must be >= 0")));
    }
    check_shapes(fwd, targets)?;
    let unit = want_grad.then(T::one);
    let (l_s1, g_dn) = term(&fwd.dn_out, targets.denoise, kind, unit);
    let (l_s2, g_up) = term(&fwd.upper, targets.removal, kind, unit);
    let (l_s3, g_fu) = term(&fwd.fused, targets.removal, kind, unit);

    let (mut l_t1, mut l_t2) = (0.0, 0.0);
    let mut g_up = g_up;
    let mut g_fu = g_fu;
    if lambda > 0.0 {
        let weight = want_grad.then(|| T::lit(lambda));
        let (f_ref, _) = pn.forward(targets.removal)?;
        for (out, l, g) in [(&fwd.upper, &mut l_t1, &mut g_up), (&fwd.fused, &mut l_t2, &mut g_fu)] {
            let (feat, trace) = pn.forward(out)?;
            let (value, dfeat) = term(&feat, &f_ref, kind, weight);
            *l = value;
            if let (Some(g), Some(dfeat)) = (g.as_mut(), dfeat) {
                g.add_assign(&pn.backward_input(&trace, &dfeat));
            }
        }
    }
    let breakdown = LossBreakdown::new(l_s1, l_s2, l_s3, l_t1, l_t2, lambda);
    let grads = match (g_dn, g_up, g_fu) {
        (Some(dn_out), Some(upper), Some(fused)) => Some(OutputGrads { dn_out, upper, fused }),
        _ => None,
    };
    Ok((breakdown, grads))
}

/// All five terms for a single sample. `dn_out` is the denoising U-Net's
/// output. Texture terms are evaluated even when `lambda == 0`.
pub fn mixed_loss(
    out: &PslnetOutput,
    dn_out: &Image,
    sample: &TrainingSample,
    pn: &PerceptionNet<f32>,
    lambda: f64,
) -> Result<LossBreakdown> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Parameter(format!("lambda {lambda} must be >= 0")));
    }
    let dims = out.fused.dims();
    for (what, img) in [
        ("upper", &out.upper),
        ("dn output", dn_out),
        ("denoise target", &sample.denoise_target),
        ("removal target", &sample.removal_target),
    ] {
        if img.dims() != dims {
            return Err(Error::Shape(format!("{what} is {:?}, output is {dims:?}", img.dims())));
        }
    }
    let t = |img: &Image| batch_to_tensor::<f32>(&[img]);
    let (upper, fused, removal) = (t(&out.upper)?, t(&out.fused)?, t(&sample.removal_target)?);
    let (l_s1, _) = term(&t(dn_out)?, &t(&sample.denoise_target)?, LossType::L1, None);
    let (l_s2, _) = term(&upper, &removal, LossType::L1, None);
    let (l_s3, _) = term(&fused, &removal, LossType::L1, None);
    let f_ref = pn.forward(&removal)?.0;
    let (l_t1, _) = term(&pn.forward(&upper)?.0, &f_ref, LossType::L1, None);
    let (l_t2, _) = term(&pn.forward(&fused)?.0, &f_ref, LossType::L1, None);
    Ok(LossBreakdown::new(l_s1, l_s2, l_s3, l_t1, l_t2, lambda))
}

/// Loss plus gradients for every trainable parameter and for the input.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub breakdown: LossBreakdown,
    pub params: Pslnet<T>,
    pub input: Tensor<T>,
}

/// Forward, loss and full backward pass on one batch. The perception
/// network receives no gradient.
pub fn loss_gradient<T: Real>(
    model: &Pslnet<T>,
    pn: &PerceptionNet<T>,
    input: &Tensor<T>,
    targets: &Targets<'_, T>,
    lambda: f64,
    kind: LossType,
    ablation: Ablation,
) -> Result<Gradients<T>> {
    let fwd = model.forward(input, ablation)?;
    let (breakdown, grads) = loss_and_output_grads(&fwd, targets, pn, lambda, kind, true)?;
    let mut params = model.zeros_like();
    let dx = model.backward(&fwd, &grads.expect("requested"), &mut params);
    Ok(Gradients {
        breakdown,
        params,
        input: dx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_term_and_subgradient() {
        let p = Tensor::from_vec(&[1, 1, 1, 4], vec![0.5f64, 0.2, 0.3, 0.0]).unwrap();
        let t = Tensor::from_vec(&[1, 1, 1, 4], vec![0.1f64, 0.2, 0.7, 0.0]).unwrap();
        let (v, g) = term(&p, &t, LossType::L1, Some(1.0));
        assert!((v - 0.2).abs() < 1e-12);
        assert_eq!(g.unwrap().data(), &[0.25, 0.0, -0.25, 0.0]);
        let (v, g) = term(&p, &t, LossType::L2, Some(1.0));
        assert!((v - (0.16 + 0.16) / 4.0).abs() < 1e-12);
        assert!((g.unwrap().data()[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn breakdown_total() {
        let b = LossBreakdown::new(0.2, 0.1, 0.3, 5.0, 7.0, 0.0);
        assert!((b.total - 0.6).abs() < 1e-12);
        let b = LossBreakdown::new(0.2, 0.1, 0.3, 5.0, 7.0, 0.5);
        assert!((b.total - 6.6).abs() < 1e-12);
    }
}
