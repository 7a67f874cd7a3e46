use super::{OpError, Tensor};

fn pool_dims(h: usize, w: usize, size: usize, stride: usize) -> (usize, usize, usize) {
    let pad = size - 1;
    ((h + pad - size) / stride + 1, (w + pad - size) / stride + 1, pad / 2)
}

/// Window max with implicit −∞ padding of `size − 1` split as darknet does.
/// Ties resolve to the first element in row-major window order.
#[allow(clippy::too_many_arguments)]
fn window_argmax(
    plane: &[f32],
    h: usize,
    w: usize,
    oy: usize,
    ox: usize,
    size: usize,
    stride: usize,
    off: usize,
) -> usize {
    let mut best = f32::NEG_INFINITY;
    let mut arg = usize::MAX;
    for ky in 0..size {
        let iy = (oy * stride + ky) as isize - off as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        for kx in 0..size {
            let ix = (ox * stride + kx) as isize - off as isize;
            if ix < 0 || ix >= w as isize {
                continue;
            }
            let idx = iy as usize * w + ix as usize;
            if arg == usize::MAX || plane[idx] > best {
                best = plane[idx];
                arg = idx;
            }
        }
    }
    arg
}

pub fn maxpool_forward(x: &Tensor, size: usize, stride: usize) -> Tensor {
    let (c, h, w) = (x.c(), x.h(), x.w());
    let (oh, ow, off) = pool_dims(h, w, size, stride);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = x.plane(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let a = window_argmax(plane, h, w, oy, ox, size, stride, off);
                out.push(plane[a]);
            }
        }
    }
    Tensor {
        shape: vec![c, oh, ow],
        data: out,
    }
}

pub fn maxpool_backward(x: &Tensor, size: usize, stride: usize, grad_out: &Tensor) -> Result<Tensor, OpError> {
    let (c, h, w) = (x.c(), x.h(), x.w());
    let (oh, ow, off) = pool_dims(h, w, size, stride);
    if grad_out.shape() != [c, oh, ow] {
        return Err(OpError::ShapeConflict {
            a: grad_out.shape().to_vec(),
            b: vec![c, oh, ow],
        });
    }
    let mut gx = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let plane = x.plane(ch);
        let g = grad_out.plane(ch);
        let dst = &mut gx.data_mut()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let a = window_argmax(plane, h, w, oy, ox, size, stride, off);
                dst[a] += g[oy * ow + ox];
            }
        }
    }
    Ok(gx)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_forward(x: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = (x.c(), x.h(), x.w());
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = x.plane(ch);
        for oy in 0..oh {
            let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
            out.extend((0..ow).map(|ox| row[ox / factor]));
        }
    }
    Tensor {
        shape: vec![c, oh, ow],
        data: out,
    }
}

pub fn upsample_backward(grad_out: &Tensor, factor: usize) -> Tensor {
    let (c, oh, ow) = (grad_out.c(), grad_out.h(), grad_out.w());
    let (h, w) = (oh / factor, ow / factor);
    let mut gx = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        let g = grad_out.plane(ch);
        let dst = &mut gx.data_mut()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / factor) * w + ox / factor] += g[oy * ow + ox];
            }
        }
    }
    gx
}

/// Stacks channels of the inputs in order.
pub fn route_concat(xs: &[&Tensor]) -> Result<Tensor, OpError> {
    let first = xs.first().ok_or(OpError::BadShape { shape: vec![], len: 0 })?;
    let (h, w) = (first.h(), first.w());
    let mut c = 0;
    let mut data = Vec::new();
    for x in xs {
        if (x.h(), x.w()) != (h, w) {
            return Err(OpError::ShapeConflict {
                a: first.shape().to_vec(),
                b: x.shape().to_vec(),
            });
        }
        c += x.c();
        data.extend_from_slice(x.data());
    }
    Tensor::chw(c, h, w, data)
}

/// Channel slice `group_id` of `groups` equal slices.
pub fn route_group(x: &Tensor, groups: usize, group_id: usize) -> Tensor {
    let per = x.c() / groups;
    let hw = x.h() * x.w();
    Tensor {
        shape: vec![per, x.h(), x.w()],
        data: x.data()[group_id * per * hw..(group_id + 1) * per * hw].to_vec(),
    }
}

pub fn shortcut_add(a: &Tensor, b: &Tensor) -> Result<Tensor, OpError> {
    if a.shape() != b.shape() {
        return Err(OpError::ShapeConflict {
            a: a.shape().to_vec(),
            b: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}
