use rayon::prelude::*;

use super::{OpError, Tensor};

/// Geometry of a square-kernel convolution with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.size) / self.stride + 1,
            (w + 2 * self.pad - self.size) / self.stride + 1,
        )
    }

    pub fn kernel_len(&self) -> usize {
        self.out_channels * self.in_channels * self.size * self.size
    }

    /// Output positions `o` in `0..out` whose input `o*stride + k - pad` is in `0..len`.
    fn valid(&self, k: usize, len: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        // smallest o with o*s + k >= pad
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(s) };
        // largest o with o*s + k - pad <= len - 1
        let hi = if len + self.pad > k {
            ((len + self.pad - k - 1) / s + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn check(x: &Tensor, kernel: &[f32], g: &ConvGeom) -> Result<(), OpError> {
    if x.c() != g.in_channels {
        return Err(OpError::ChannelMismatch {
            expected: g.in_channels,
            actual: x.c(),
        });
    }
    if kernel.len() != g.kernel_len() {
        return Err(OpError::BadShape {
            shape: vec![g.out_channels, g.in_channels, g.size, g.size],
            len: kernel.len(),
        });
    }
    Ok(())
}

/// Cross-correlation without bias. For every output element the sum runs over
/// kernel rows, then kernel columns, then input channels.
pub fn conv2d_forward(x: &Tensor, kernel: &[f32], g: ConvGeom) -> Result<Tensor, OpError> {
    check(x, kernel, &g)?;
    let (h, w) = (x.h(), x.w());
    let (oh, ow) = g.out_dims(h, w);
    let (k, s, cin) = (g.size, g.stride, g.in_channels);
    let input = x.data();
    let mut out = vec![0.0f32; g.out_channels * oh * ow];
    if oh * ow == 0 {
        return Tensor::chw(g.out_channels, oh, ow, out);
    }
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(oc, plane)| {
        let wk = &kernel[oc * cin * k * k..(oc + 1) * cin * k * k];
        for ky in 0..k {
            let (y0, y1) = g.valid(ky, h, oh);
            for kx in 0..k {
                let (x0, x1) = g.valid(kx, w, ow);
                if x0 >= x1 {
                    continue;
                }
                for ic in 0..cin {
                    let wv = wk[(ic * k + ky) * k + kx];
                    let src = &input[ic * h * w..(ic + 1) * h * w];
                    for oy in y0..y1 {
                        let iy = oy * s + ky - g.pad;
                        let row = &src[iy * w..(iy + 1) * w];
                        let dst = &mut plane[oy * ow + x0..oy * ow + x1];
                        if s == 1 {
                            let off = x0 + kx - g.pad;
                            for (d, &v) in dst.iter_mut().zip(&row[off..off + (x1 - x0)]) {
                                *d += wv * v;
                            }
                        } else {
                            for (j, d) in dst.iter_mut().enumerate() {
                                *d += wv * row[(x0 + j) * s + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::chw(g.out_channels, oh, ow, out)
}

/// Gradients of [`conv2d_forward`] with respect to the input (when requested)
/// and the kernel.
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &[f32],
    g: ConvGeom,
    grad_out: &Tensor,
    want_input_grad: bool,
) -> Result<(Option<Tensor>, Vec<f32>), OpError> {
    check(x, kernel, &g)?;
    let (h, w) = (x.h(), x.w());
    let (oh, ow) = g.out_dims(h, w);
    if grad_out.shape() != [g.out_channels, oh, ow] {
        return Err(OpError::ShapeConflict {
            a: grad_out.shape().to_vec(),
            b: vec![g.out_channels, oh, ow],
        });
    }
    let (k, s, cin) = (g.size, g.stride, g.in_channels);
    let input = x.data();
    let gout = grad_out.data();

    let mut grad_w = vec![0.0f32; g.kernel_len()];
    grad_w.par_chunks_mut(cin * k * k).enumerate().for_each(|(oc, gw)| {
        let gplane = &gout[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..cin {
            let src = &input[ic * h * w..(ic + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = g.valid(ky, h, oh);
                for kx in 0..k {
                    let (x0, x1) = g.valid(kx, w, ow);
                    let mut acc = 0.0f32;
                    for oy in y0..y1 {
                        let iy = oy * s + ky - g.pad;
                        for ox in x0..x1 {
                            acc += gplane[oy * ow + ox] * src[iy * w + ox * s + kx - g.pad];
                        }
                    }
                    gw[(ic * k + ky) * k + kx] = acc;
                }
            }
        }
    });

    let grad_x = if want_input_grad {
        let mut gx = vec![0.0f32; cin * h * w];
        gx.par_chunks_mut(h * w).enumerate().for_each(|(ic, dst)| {
            for oc in 0..g.out_channels {
                let gplane = &gout[oc * oh * ow..(oc + 1) * oh * ow];
                for ky in 0..k {
                    let (y0, y1) = g.valid(ky, h, oh);
                    for kx in 0..k {
                        let (x0, x1) = g.valid(kx, w, ow);
                        let wv = kernel[((oc * cin + ic) * k + ky) * k + kx];
                        for oy in y0..y1 {
                            let iy = oy * s + ky - g.pad;
                            for ox in x0..x1 {
                                dst[iy * w + ox * s + kx - g.pad] += wv * gplane[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        });
        Some(Tensor::chw(cin, h, w, gx)?)
    } else {
        None
    };
    Ok((grad_x, grad_w))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straightforward nested-loop reference with explicit bounds checks.
    fn reference(x: &Tensor, kernel: &[f32], g: ConvGeom) -> Vec<f32> {
        let (h, w) = (x.h() as isize, x.w() as isize);
        let (oh, ow) = g.out_dims(x.h(), x.w());
        let k = g.size;
        let mut out = vec![0.0f32; g.out_channels * oh * ow];
        for oc in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ky in 0..k {
                        for kx in 0..k {
                            for ic in 0..g.in_channels {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h || ix >= w {
                                    continue;
                                }
                                acc += kernel[((oc * g.in_channels + ic) * k + ky) * k + kx]
                                    * x.at(ic, iy as usize, ix as usize);
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_on_ones_image() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let g = ConvGeom {
            in_channels: 1,
            out_channels: 1,
            size: 3,
            stride: 1,
            pad: 1,
        };
        let y = conv2d_forward(&x, &[1.0; 9], g).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn identity_1x1() {
        let data: Vec<f32> = (0..2 * 3 * 3).map(|v| v as f32 * 0.5 - 3.0).collect();
        let x = Tensor::chw(2, 3, 3, data).unwrap();
        let g = ConvGeom {
            in_channels: 2,
            out_channels: 2,
            size: 1,
            stride: 1,
            pad: 0,
        };
        let y = conv2d_forward(&x, &[1.0, 0.0, 0.0, 1.0], g).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn stride_two_shape() {
        let x = Tensor::full(&[1, 4, 4], 1.0);
        let g = ConvGeom {
            in_channels: 1,
            out_channels: 1,
            size: 3,
            stride: 2,
            pad: 1,
        };
        assert_eq!(conv2d_forward(&x, &[1.0; 9], g).unwrap().shape(), &[1, 2, 2]);
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let g = ConvGeom {
            in_channels: 3,
            out_channels: 1,
            size: 1,
            stride: 1,
            pad: 0,
        };
        assert_eq!(
            conv2d_forward(&x, &[0.0; 3], g),
            Err(OpError::ChannelMismatch { expected: 3, actual: 2 })
        );
    }

    #[test]
    fn matches_reference_bitwise() {
        let mut seed = 7u32;
        let mut next = || {
            seed = seed.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
            (seed >> 8) as f32 / (1u32 << 24) as f32 - 0.5
        };
        for &(cin, cout, size, stride, pad, h, w) in &[
            (3, 4, 3, 1, 1, 7, 5),
            (2, 3, 3, 2, 1, 8, 9),
            (4, 2, 1, 1, 0, 5, 5),
            (2, 2, 5, 1, 2, 6, 6),
            (3, 2, 3, 2, 0, 9, 7),
        ] {
            let x = Tensor::chw(cin, h, w, (0..cin * h * w).map(|_| next()).collect()).unwrap();
            let g = ConvGeom {
                in_channels: cin,
                out_channels: cout,
                size,
                stride,
                pad,
            };
            let kern: Vec<f32> = (0..g.kernel_len()).map(|_| next()).collect();
            let y = conv2d_forward(&x, &kern, g).unwrap();
            assert_eq!(y.data(), reference(&x, &kern, g).as_slice());
        }
    }
}
