//! Direct (loop-based) convolution and pooling kernels for `[N, C, H, W]` inputs.

use super::value::Tensor;
use crate::error::{Error, Result};

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    pad: usize,
}

fn conv_dims(input: &Tensor, weight: &Tensor, pad: usize) -> Result<ConvDims> {
    let mismatch = || Error::ShapeMismatch {
        op: "conv2d",
        lhs: input.shape().to_vec(),
        rhs: weight.shape().to_vec(),
    };
    let (&[n, c, h, w], &[o, wc, kh, kw]) = (input.shape(), weight.shape()) else {
        return Err(mismatch());
    };
    if wc != c || kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(mismatch());
    }
    Ok(ConvDims {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        oh: h + 2 * pad - kh + 1,
        ow: w + 2 * pad - kw + 1,
        pad,
    })
}

/// Visits every (output, input, weight) index triple touching a non-padded pixel.
fn for_each_tap(d: &ConvDims, mut f: impl FnMut(usize, usize, usize)) {
    for b in 0..d.n {
        for oc in 0..d.o {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let out_idx = ((b * d.o + oc) * d.oh + oy) * d.ow + ox;
                    for ic in 0..d.c {
                        for ky in 0..d.kh {
                            let iy = (oy + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..d.kw {
                                let ix = (ox + kx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let in_idx =
                                    ((b * d.c + ic) * d.h + iy as usize) * d.w + ix as usize;
                                let w_idx = ((oc * d.c + ic) * d.kh + ky) * d.kw + kx;
                                f(out_idx, in_idx, w_idx);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(input: &Tensor, weight: &Tensor, pad: usize) -> Result<Tensor> {
    let d = conv_dims(input, weight, pad)?;
    let mut out = vec![0.0; d.n * d.o * d.oh * d.ow];
    let (x, k) = (input.data(), weight.data());
    for_each_tap(&d, |o, i, w| out[o] += x[i] * k[w]);
    Tensor::new([d.n, d.o, d.oh, d.ow], out)
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad: &Tensor,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let d = conv_dims(input, weight, pad)?;
    let mut gx = vec![0.0; input.len()];
    let mut gw = vec![0.0; weight.len()];
    let (x, k, g) = (input.data(), weight.data(), grad.data());
    for_each_tap(&d, |o, i, w| {
        gx[i] += g[o] * k[w];
        gw[w] += g[o] * x[i];
    });
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(weight.shape().to_vec(), gw)?,
    ))
}

/// Returns the pooled tensor and, per output element, the flat input index
/// of the selected maximum.
pub(crate) fn max_pool2d_forward(input: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let &[n, c, h, w] = input.shape() else {
        return Err(Error::InvalidShape {
            shape: input.shape().to_vec(),
            reason: "max_pool2d expects [N, C, H, W]".into(),
        });
    };
    if size == 0 || size > h || size > w {
        return Err(Error::InvalidShape {
            shape: input.shape().to_vec(),
            reason: format!("pool window {size} does not fit"),
        });
    }
    let (oh, ow) = (h / size, w / size);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (f64::NEG_INFINITY, 0);
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = (plane * h + oy * size + dy) * w + ox * size + dx;
                        if x[idx] > best.0 {
                            best = (x[idx], idx);
                        }
                    }
                }
                out.push(best.0);
                argmax.push(best.1);
            }
        }
    }
    Ok((Tensor::new([n, c, oh, ow], out)?, argmax))
}
