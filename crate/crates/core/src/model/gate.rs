//! Channel-attention interaction: pool → 1×1 conv → ReLU → 1×1 conv → sigmoid.

use crate::nn::{join, Conv2d, ConvGraph};
use crate::ops::{global_avg_pool, global_avg_pool_backward, relu_backward_inplace, relu_inplace, sigmoid};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionGate<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
}

#[derive(Debug, Clone)]
pub struct GateTrace<T> {
    height: usize,
    width: usize,
    pooled: Tensor<T>,
    hidden: Tensor<T>,
    gate: Tensor<T>,
}

impl<T: Real> InteractionGate<T> {
    pub fn new(hidden: usize) -> Self {
        Self {
            conv1: Conv2d::zeros(3, hidden, 1),
            conv2: Conv2d::zeros(hidden, 3, 1),
        }
    }

    /// Per-(channel, sample) gate in `(0, 1)`, shaped `[3, N, 1, 1]`.
    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, GateTrace<T>) {
        let (_, _, height, width) = x.dims4();
        let pooled = global_avg_pool(x);
        let mut hidden = self.conv1.forward(&pooled);
        relu_inplace(&mut hidden);
        let gate = self.conv2.forward(&hidden).map(sigmoid);
        let trace = GateTrace {
            height,
            width,
            pooled,
            hidden,
            gate: gate.clone(),
        };
        (gate, trace)
    }

    pub fn backward(
        &self,
        trace: &GateTrace<T>,
        dgate: &Tensor<T>,
        grad: Option<&mut InteractionGate<T>>,
    ) -> Tensor<T> {
        let mut dpre = dgate.clone();
        for (d, &g) in dpre.data_mut().iter_mut().zip(trace.gate.data()) {
            *d *= g * (T::one() - g);
        }
        let (g1, g2) = match grad {
            Some(gr) => (Some(&mut gr.conv1), Some(&mut gr.conv2)),
            None => (None, None),
        };
        let mut dh = self.conv2.backward(&trace.hidden, &dpre, g2, true).expect("dx");
        relu_backward_inplace(&mut dh, &trace.hidden);
        let dpool = self.conv1.backward(&trace.pooled, &dh, g1, true).expect("dx");
        global_avg_pool_backward(&dpool, trace.height, trace.width)
    }
}

impl<T: Real> ConvGraph<T> for InteractionGate<T> {
    fn visit_convs<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Conv2d<T>)) {
        f(join(prefix, "conv1"), &self.conv1);
        f(join(prefix, "conv2"), &self.conv2);
    }

    fn visit_convs_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Conv2d<T>)) {
        f(join(prefix, "conv1"), &mut self.conv1);
        f(join(prefix, "conv2"), &mut self.conv2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn random(shape: &[usize], rng: &mut crate::rng::Rng) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_second_layer_gives_one_half() {
        let mut gate = InteractionGate::<f64>::new(16);
        gate.init_he(1);
        gate.conv2.weight.fill(0.0);
        let x = Tensor::filled(&[3, 2, 4, 4], 0.7);
        let (g, _) = gate.forward(&x);
        assert!(g.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn large_bias_saturates_to_one() {
        let mut gate = InteractionGate::<f64>::new(16);
        gate.init_he(2);
        gate.conv2.weight.fill(0.0);
        gate.conv2.bias.fill(50.0);
        let (g, _) = gate.forward(&Tensor::filled(&[3, 1, 4, 4], 0.2));
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn matches_scalar_chain() {
        let mut rng = seeded(77);
        let mut gate = InteractionGate::<f64>::new(5);
        gate.conv1.weight = random(&[5, 3, 1, 1], &mut rng);
        gate.conv1.bias = random(&[5], &mut rng);
        gate.conv2.weight = random(&[3, 5, 1, 1], &mut rng);
        gate.conv2.bias = random(&[3], &mut rng);
        let x = random(&[3, 2, 6, 4], &mut rng);
        let (g, _) = gate.forward(&x);
        for n in 0..2 {
            let pooled: Vec<f64> = (0..3)
                .map(|c| {
                    let plane = &x.data()[(c * 2 + n) * 24..][..24];
                    plane.iter().sum::<f64>() / 24.0
                })
                .collect();
            let hidden: Vec<f64> = (0..5)
                .map(|j| {
                    let s: f64 = (0..3).map(|c| gate.conv1.weight.data()[j * 3 + c] * pooled[c]).sum();
                    (s + gate.conv1.bias.data()[j]).max(0.0)
                })
                .collect();
            for c in 0..3 {
                let s: f64 = (0..5).map(|j| gate.conv2.weight.data()[c * 5 + j] * hidden[j]).sum();
                let want = 1.0 / (1.0 + (-(s + gate.conv2.bias.data()[c])).exp());
                assert!((g.data()[c * 2 + n] - want).abs() < 1e-6);
                assert!(want > 0.0 && want < 1.0);
            }
        }
    }
}
