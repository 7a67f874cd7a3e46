use super::{OpError, Tensor};

pub const DEFAULT_EPSILON: f32 = 1e-5;

/// Inference-mode batch normalization: stored statistics, learnable γ and β.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub epsilon: f32,
}

impl BnParams {
    pub fn identity(channels: usize) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, channels: usize) -> Result<(), OpError> {
        let n = self.gamma.len();
        if self.beta.len() != n || self.mean.len() != n || self.var.len() != n || n != channels {
            return Err(OpError::ChannelMismatch {
                expected: n,
                actual: channels,
            });
        }
        if let Some(channel) = self.var.iter().position(|&v| v < 0.0) {
            return Err(OpError::NegativeVariance { channel });
        }
        Ok(())
    }

    fn inv_std(&self, c: usize) -> f32 {
        1.0 / (self.var[c] + self.epsilon).sqrt()
    }
}

/// `y = γ·(x − μ)/√(σ² + ε) + β`, per channel.
///
/// With `γ = β = 0` every output is exactly zero.
pub fn batchnorm_forward(x: &Tensor, p: &BnParams) -> Result<Tensor, OpError> {
    p.check(x.c())?;
    let hw = x.h() * x.w();
    let mut out = x.clone();
    for (c, plane) in out.data_mut().chunks_mut(hw.max(1)).enumerate().take(p.channels()) {
        let (mean, inv, gamma, beta) = (p.mean[c], p.inv_std(c), p.gamma[c], p.beta[c]);
        for v in plane {
            *v = (*v - mean) * inv * gamma + beta;
        }
    }
    Ok(out)
}

/// Folds batch norm into the preceding convolution, returning a kernel and
/// bias that produce the normalized output directly.
pub fn fold_batchnorm(kernel: &[f32], bias: Option<&[f32]>, p: &BnParams) -> Result<(Vec<f32>, Vec<f32>), OpError> {
    let n = p.channels();
    p.check(n)?;
    if n == 0 || !kernel.len().is_multiple_of(n) {
        return Err(OpError::BadShape {
            shape: vec![n],
            len: kernel.len(),
        });
    }
    let per = kernel.len() / n;
    let mut k = kernel.to_vec();
    let mut b = vec![0.0f32; n];
    for c in 0..n {
        let scale = p.gamma[c] * p.inv_std(c);
        for v in &mut k[c * per..(c + 1) * per] {
            *v *= scale;
        }
        let pre = bias.map_or(0.0, |bs| bs[c]);
        b[c] = p.beta[c] + (pre - p.mean[c]) * scale;
    }
    Ok((k, b))
}

/// Gradients with respect to the BN input, γ and β. Statistics are constants.
pub fn batchnorm_backward(
    x: &Tensor,
    p: &BnParams,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<f32>, Vec<f32>), OpError> {
    p.check(x.c())?;
    if x.shape() != grad_out.shape() {
        return Err(OpError::ShapeConflict {
            a: x.shape().to_vec(),
            b: grad_out.shape().to_vec(),
        });
    }
    let hw = x.h() * x.w();
    let n = p.channels();
    let mut gx = grad_out.clone();
    let mut dgamma = vec![0.0f32; n];
    let mut dbeta = vec![0.0f32; n];
    for c in 0..n {
        let inv = p.inv_std(c);
        let xs = &x.data()[c * hw..(c + 1) * hw];
        let gs = &grad_out.data()[c * hw..(c + 1) * hw];
        let (mut dg, mut db) = (0.0f32, 0.0f32);
        for (&xv, &g) in xs.iter().zip(gs) {
            dg += g * (xv - p.mean[c]) * inv;
            db += g;
        }
        dgamma[c] = dg;
        dbeta[c] = db;
        let scale = p.gamma[c] * inv;
        for v in &mut gx.data_mut()[c * hw..(c + 1) * hw] {
            *v *= scale;
        }
    }
    Ok((gx, dgamma, dbeta))
}
