use super::{OpError, Tensor};
use crate::netcfg::Activation;

const LEAKY_SLOPE: f32 = 0.1;

/// `ln(1 + eˣ)` without overflow for large |x|.
pub fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn mish(x: f32) -> f32 {
    x * softplus(x).tanh()
}

pub fn activate_scalar(x: f32, kind: Activation) -> f32 {
    match kind {
        Activation::Mish => mish(x),
        Activation::Leaky => {
            if x > 0.0 {
                x
            } else {
                LEAKY_SLOPE * x
            }
        }
        Activation::Linear => x,
        Activation::Sigmoid => sigmoid(x),
    }
}

fn derivative(x: f32, kind: Activation) -> f32 {
    match kind {
        Activation::Mish => {
            let t = softplus(x).tanh();
            t + x * (1.0 - t * t) * sigmoid(x)
        }
        Activation::Leaky => {
            if x > 0.0 {
                1.0
            } else {
                LEAKY_SLOPE
            }
        }
        Activation::Linear => 1.0,
        Activation::Sigmoid => {
            let s = sigmoid(x);
            s * (1.0 - s)
        }
    }
}

pub fn activate(x: &Tensor, kind: Activation) -> Tensor {
    if kind == Activation::Linear {
        return x.clone();
    }
    x.map(|v| activate_scalar(v, kind))
}

/// Gradient through the activation given its pre-activation input.
pub fn activation_backward(pre: &Tensor, kind: Activation, grad_out: &Tensor) -> Result<Tensor, OpError> {
    if pre.shape() != grad_out.shape() {
        return Err(OpError::ShapeConflict {
            a: pre.shape().to_vec(),
            b: grad_out.shape().to_vec(),
        });
    }
    if kind == Activation::Linear {
        return Ok(grad_out.clone());
    }
    let data = pre
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| g * derivative(x, kind))
        .collect();
    Tensor::new(pre.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_values() {
        assert_eq!(mish(0.0), 0.0);
        assert_eq!(activate_scalar(-1.0, Activation::Leaky), -0.1);
        // 1·tanh(ln(1 + e)) evaluated in f64
        let expected = (1.0f64.exp().ln_1p()).tanh();
        assert!((expected - 0.865_098_39).abs() < 1e-8);
        assert!((f64::from(mish(1.0)) - expected).abs() < 1e-6);
        assert_eq!(activate_scalar(3.0, Activation::Linear), 3.0);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn extreme_inputs_stay_finite() {
        for x in [-1e4f32, -100.0, -30.0, 30.0, 100.0, 1e4] {
            assert!(mish(x).is_finite());
            assert!(derivative(x, Activation::Mish).is_finite());
            assert!(sigmoid(x).is_finite());
        }
        assert_eq!(mish(1e4), 1e4);
    }

    #[test]
    fn leaky_slope_gradient() {
        let pre = Tensor::chw(1, 1, 2, vec![-1.0, 2.0]).unwrap();
        let g = Tensor::chw(1, 1, 2, vec![1.0, 1.0]).unwrap();
        let d = activation_backward(&pre, Activation::Leaky, &g).unwrap();
        assert_eq!(d.data(), &[0.1, 1.0]);
    }
}
